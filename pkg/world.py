"""
Physics of the multi-UAV data-collection world
- Rotary-wing propulsion energy and rotor thrust
- Probabilistic LoS air-to-ground channel with co-channel interference
- SN batteries with Bernoulli energy arrivals, AoI dynamics
- world_step: one slot of the whole system as a pure, seedable transition
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from config import ROLE_LAYOUT, make_rng

# Slack for floating-point comparisons on positions (m) and energies (J)
POSITION_EPS = 1e-9
ENERGY_EPS = 1e-12


class AltitudeExceedsRange(ValueError):
    """The NLoS link budget cannot reach the ground from the flight altitude"""


class BadGeometry(ValueError):
    """Link distance shorter than the altitude"""


class NoScheduledSn(ValueError):
    """SINR requested for a UAV that scheduled nobody"""


class EnergyCausalityViolation(RuntimeError):
    """An SN transmitted without holding one transmission's worth of energy"""


class OutOfArea(RuntimeError):
    """A movement left the square service area"""


class EpisodeOver(RuntimeError):
    """world_step called after the last slot"""


@dataclass(frozen=True)
class SensorNode:
    id: int                     # 1..N, 0 is reserved for "no SN"
    position: tuple             # (x, y) on the ground
    battery: float
    aoi: int
    harvest_prob: float


@dataclass(frozen=True)
class UavPose:
    id: int                     # 0-based UAV index
    position: tuple
    speed: float
    heading: float              # heading flown in the previous slot
    energy_spent: float = 0.0
    time_diff: float = 0.0
    energy_diff: float = 0.0


@dataclass(frozen=True)
class WorldState:
    t: int
    sns: tuple
    uavs: tuple
    rng_stream: tuple = ()

    @property
    def aoi(self):
        return np.array([sn.aoi for sn in self.sns], dtype=int)

    @property
    def batteries(self):
        return np.array([sn.battery for sn in self.sns], dtype=float)


@dataclass(frozen=True)
class TransmissionOutcome:
    uav: int
    sn: int
    los_drawn: bool
    sinr: float
    success: bool


@dataclass(frozen=True)
class UavControl:
    """Physical control of one UAV for one slot"""

    speed_next: float
    heading: float
    schedule: int = 0


# ===========================
# Geometry helpers
# ===========================

def ground_distance(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def link_distance(sn_position, uav_position, cfg):
    return math.sqrt(ground_distance(sn_position, uav_position) ** 2 + cfg.altitude ** 2)


def wrap_angle(angle):
    wrapped = math.fmod(angle, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    # fmod of values just below 2*pi can round up to 2*pi
    return 0.0 if wrapped >= 2.0 * math.pi else wrapped


def inside_area(position, cfg, slack=POSITION_EPS):
    x, y = position
    return -slack <= x <= cfg.area_side + slack and -slack <= y <= cfg.area_side + slack


# ===========================
# Channel
# ===========================

def link_budget_distance(cfg):
    """Largest 3D distance at which an NLoS link still clears the SINR threshold without interference"""
    ratio = cfg.p_c / (cfg.xi_th * cfg.noise_power * cfg.eta_nlos)
    return cfg.light_speed / (4.0 * math.pi * cfg.f_c) * ratio ** (1.0 / cfg.path_loss_exp)


def coverage_radius(cfg):
    """Ground radius R_U of the disk a UAV can serve at its altitude"""
    d = link_budget_distance(cfg)
    if d < cfg.altitude:
        raise AltitudeExceedsRange(f"Link budget {d:.2f} m is below the altitude {cfg.altitude} m")
    return math.sqrt(d * d - cfg.altitude ** 2)


def los_probability(distance, altitude, cfg):
    """Sigmoid LoS probability in the elevation angle (degrees)"""
    if distance < altitude or altitude <= 0:
        raise BadGeometry(f"Link distance {distance} m shorter than altitude {altitude} m")
    elevation = math.degrees(math.asin(min(1.0, altitude / distance)))
    return 1.0 / (1.0 + cfg.beta0 * math.exp(-cfg.beta1 * (elevation - cfg.beta0)))


def free_space_factor(distance, cfg):
    return (4.0 * math.pi * cfg.f_c * distance / cfg.light_speed) ** cfg.path_loss_exp


def sample_path_loss(distance, cfg, rng):
    """Draw the LoS state of one link (one uniform) and return its linear path loss"""
    if distance <= 0:
        raise BadGeometry(f"Link distance must be positive, got {distance}")
    p_los = los_probability(distance, cfg.altitude, cfg)
    los = bool(rng.random() < p_los)
    eta = cfg.eta_los if los else cfg.eta_nlos
    return {"path_loss": free_space_factor(distance, cfg) * eta, "los_drawn": los}


def sinr(m, schedules, gains, cfg):
    """
    SINR of UAV m's scheduled SN.
    schedules: per-UAV SN id (0 = none); gains: {(sn, uav): linear channel gain}.
    Interference comes from SNs scheduled by other UAVs; an SN transmits once, so
    duplicates count once and m's own SN never interferes with itself.
    """
    n = schedules[m]
    if n == 0:
        raise NoScheduledSn(f"UAV {m} has no scheduled SN")
    interferers = {b for k, b in enumerate(schedules) if k != m and b != 0} - {n}
    interference = sum(cfg.p_c * gains[(b, m)] for b in sorted(interferers))
    return cfg.p_c * gains[(n, m)] / (cfg.noise_power + interference)


# ===========================
# Propulsion
# ===========================

def rotor_thrust(v, v_next, cfg):
    """Thrust of one rotor while changing speed from v to v_next over one slot"""
    accel = (v_next - v) / cfg.slot_len
    drag = 0.5 * cfg.rho * v * v * cfg.s_fp
    return math.hypot(cfg.mass * accel + drag, cfg.mass * cfg.gravity) / cfg.n_r


def propulsion_energy(v, v_next, cfg):
    """Energy (J) of one slot flown at speed v with acceleration toward v_next"""
    thrust = rotor_thrust(v, v_next, cfg)
    rho, area = cfg.rho, cfg.rotor_area
    profile = (cfg.sigma_blade / 8.0 * (thrust / (cfg.c_t * rho * area) + 3.0 * v * v)
               * math.sqrt(thrust * rho * cfg.c_s ** 2 * area / cfg.c_t))
    parasite = 0.5 * cfg.d_0 * rho * cfg.c_s * area * v ** 3
    inner = math.sqrt(thrust ** 2 / (4.0 * rho ** 2 * area ** 2) + v ** 4 / 4.0) - v * v / 2.0
    induced = (1.0 + cfg.c_f) * thrust * math.sqrt(max(inner, 0.0))
    return cfg.slot_len * cfg.n_r * (profile + parasite + induced)


# ===========================
# SN and AoI dynamics
# ===========================

def battery_step(energy, harvested, transmitted, cfg):
    if transmitted and energy < cfg.e_c - ENERGY_EPS:
        raise EnergyCausalityViolation(
            f"Transmission with {energy * 1e3:.4f} mJ < E_c = {cfg.e_c * 1e3:.4f} mJ"
        )
    level = energy + cfg.e_har * bool(harvested) - cfg.e_c * bool(transmitted)
    return min(max(level, 0.0), cfg.e_sn_max)


def aoi_step(aoi, delivered, cfg):
    if delivered:
        return 1
    return min(aoi + 1, cfg.delta_max)


# ===========================
# UAV kinematics
# ===========================

def displacement(v, v_next, heading, cfg):
    step = 0.5 * (v + v_next) * cfg.slot_len
    return step * math.cos(heading), step * math.sin(heading)


def advance_position(position, v, v_next, heading, cfg):
    dx, dy = displacement(v, v_next, heading, cfg)
    x, y = position[0] + dx, position[1] + dy
    if not inside_area((x, y), cfg):
        raise OutOfArea(f"Position ({x:.3f}, {y:.3f}) outside the {cfg.area_side} m square")
    return (min(max(x, 0.0), cfg.area_side), min(max(y, 0.0), cfg.area_side))


def check_collisions(positions, cfg):
    """Pairs (i, j), i < j, closer than the safe distance"""
    pairs = set()
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            if ground_distance(positions[i], positions[j]) < cfg.d_safe:
                pairs.add((i, j))
    return pairs


# ===========================
# Initial state
# ===========================

def sn_positions(cfg):
    """Fixed SN deployment of a configuration, uniform in the square"""
    rng = make_rng(cfg.sn_layout_seed, ROLE_LAYOUT)
    points = rng.uniform(0.0, cfg.area_side, size=(cfg.num_sns, 2))
    return tuple((float(x), float(y)) for x, y in points)


def bearing(origin, target):
    if ground_distance(origin, target) <= POSITION_EPS:
        return 0.0
    return wrap_angle(math.atan2(target[1] - origin[1], target[0] - origin[0]))


def initial_state(cfg, rng_stream=()):
    from feasibility import compute_diffs

    probs = cfg.harvest_probs
    sns = tuple(
        SensorNode(id=i + 1, position=p, battery=cfg.e_sn_max, aoi=cfg.initial_aoi,
                   harvest_prob=float(probs[i]))
        for i, p in enumerate(sn_positions(cfg))
    )
    uavs = []
    for m, (start, stop) in enumerate(zip(cfg.start_positions, cfg.stop_positions)):
        pose = UavPose(id=m, position=start, speed=0.0, heading=bearing(start, stop))
        time_diff, energy_diff = compute_diffs(pose, 1, cfg)
        uavs.append(replace(pose, time_diff=time_diff, energy_diff=energy_diff))
    return WorldState(t=1, sns=sns, uavs=tuple(uavs), rng_stream=tuple(rng_stream))


# ===========================
# Transition
# ===========================

def world_step(state, controls, rng, cfg):
    """
    Apply one slot of joint controls.
    Order: channel draws and SINR, AoI, harvesting and batteries, movement,
    propulsion energy, time/energy differences, collisions, slot increment.
    Returns (next_state, outcomes, collision).
    """
    from feasibility import compute_diffs

    if state.t > cfg.horizon:
        raise EpisodeOver(f"Slot {state.t} is past the horizon T={cfg.horizon}")
    if len(controls) != len(state.uavs):
        raise ValueError(f"Expected {len(state.uavs)} controls, got {len(controls)}")

    schedules = [int(c.schedule) for c in controls]
    sn_by_id = {sn.id: sn for sn in state.sns}
    transmitting = sorted({b for b in schedules if b != 0})
    for n in transmitting:
        if sn_by_id[n].battery < cfg.e_c - ENERGY_EPS:
            raise EnergyCausalityViolation(f"SN {n} scheduled with an empty battery")

    # Channel: one draw per (scheduling UAV, transmitting SN) link
    gains, los = {}, {}
    for m, pose in enumerate(state.uavs):
        if schedules[m] == 0:
            continue
        for n in transmitting:
            d = link_distance(sn_by_id[n].position, pose.position, cfg)
            draw = sample_path_loss(d, cfg, rng)
            gains[(n, m)] = 1.0 / draw["path_loss"]
            los[(n, m)] = draw["los_drawn"]

    outcomes = []
    delivered = set()
    for m in range(len(state.uavs)):
        n = schedules[m]
        if n == 0:
            outcomes.append(TransmissionOutcome(uav=m, sn=0, los_drawn=False, sinr=0.0, success=False))
            continue
        ratio = sinr(m, schedules, gains, cfg)
        success = ratio >= cfg.xi_th
        if success:
            delivered.add(n)
        outcomes.append(TransmissionOutcome(uav=m, sn=n, los_drawn=los[(n, m)], sinr=ratio, success=success))

    harvests = rng.random(len(state.sns)) < np.array([sn.harvest_prob for sn in state.sns])
    sns = tuple(
        replace(
            sn,
            aoi=aoi_step(sn.aoi, sn.id in delivered, cfg),
            battery=battery_step(sn.battery, harvests[i], sn.id in transmitting, cfg),
        )
        for i, sn in enumerate(state.sns)
    )

    next_t = state.t + 1
    uavs = []
    for pose, control in zip(state.uavs, controls):
        heading = wrap_angle(control.heading)
        position = advance_position(pose.position, pose.speed, control.speed_next, heading, cfg)
        moved = replace(
            pose,
            position=position,
            speed=float(control.speed_next),
            heading=heading,
            energy_spent=pose.energy_spent + propulsion_energy(pose.speed, control.speed_next, cfg),
        )
        time_diff, energy_diff = compute_diffs(moved, next_t, cfg)
        uavs.append(replace(moved, time_diff=time_diff, energy_diff=energy_diff))

    collision = bool(check_collisions([p.position for p in uavs], cfg))
    next_state = WorldState(t=next_t, sns=sns, uavs=tuple(uavs), rng_stream=state.rng_stream)
    return next_state, outcomes, collision
