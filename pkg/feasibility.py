"""
Terminal feasibility of UAV trajectories
Required time/energy to reach the stop point, the time/energy slack kept in
the state, and the per-slot masks of valid movements and schedules including
the forced terminal policies.

Boundary table for required_time (r = distance to stop, v = speed):
    r <= ARRIVAL_TOL, after the last slot       -> 0 (mission complete)
    aligned or v = 0                            -> 1 + ceil((r - (v_max + v) tau0 / 2) / (v_max tau0)), at least 1
    turn larger than the window and v > 0       -> 2 + ceil((r + v tau0 / 2 - v_max tau0 / 2) / (v_max tau0)), at least 2
"""
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from world import (
    POSITION_EPS,
    ENERGY_EPS,
    bearing,
    coverage_radius,
    displacement,
    ground_distance,
    inside_area,
    propulsion_energy,
    wrap_angle,
)

# Mask trigger margins: free movement needs more than this many slots / max-slot energies of slack
TIME_MARGIN = 4
ENERGY_MARGIN = 4
# Guards ceil() against representation error when the argument is an exact multiple
CEIL_EPS = 1e-9
SPEED_EPS = 1e-9


@dataclass(frozen=True)
class MovementOption:
    """Grid movement; forced options keep exact speed and bearing off the grid, indices only nearest"""

    speed_index: int
    heading_index: int
    speed_next: float
    heading: float


@dataclass(frozen=True)
class ActionMask:
    movements: tuple
    schedulable: frozenset
    forced: MovementOption = None

    def __post_init__(self):
        if not self.movements:
            raise ValueError("A mask needs at least one movement")
        if 0 not in self.schedulable:
            raise ValueError("Schedule 0 (no collection) must always be available")
        if self.forced is not None and self.movements != (self.forced,):
            raise ValueError("A forced mask holds exactly the forced movement")


def angular_distance(a, b):
    delta = abs(wrap_angle(a) - wrap_angle(b))
    return min(delta, 2.0 * math.pi - delta)


@lru_cache(maxsize=64)
def max_slot_energy(cfg):
    """Largest single-slot propulsion energy over the speed grid"""
    levels = cfg.speed_levels
    return max(propulsion_energy(v, w, cfg) for v in levels for w in levels)


def _stop_of(cfg, uav_id):
    return cfg.stop_positions[uav_id]


def _can_turn_to(heading, target_heading, speed, cfg):
    return speed <= SPEED_EPS or angular_distance(heading, target_heading) <= cfg.dphi_max + 1e-12


# ===========================
# Required time / energy
# ===========================

def required_time(position, speed, heading, stop, cfg):
    """Slots needed to reach the stop point with the accelerate-then-cruise policy"""
    r = ground_distance(position, stop)
    step = cfg.v_max * cfg.slot_len
    if _can_turn_to(heading, bearing(position, stop), speed, cfg) or r <= cfg.arrival_tol:
        delta1 = (cfg.v_max + speed) * cfg.slot_len / 2.0
        slots = 1 + math.ceil((r - delta1) / step - CEIL_EPS)
        return max(slots, 1)
    delta2 = speed * cfg.slot_len / 2.0
    delta3 = cfg.v_max * cfg.slot_len / 2.0
    slots = 2 + math.ceil((r + delta2 - delta3) / step - CEIL_EPS)
    return max(slots, 2)


def required_energy(position, speed, heading, stop, cfg):
    """Propulsion energy of the policy counted by required_time"""
    slots = required_time(position, speed, heading, stop, cfg)
    cruise = propulsion_energy(cfg.v_max, cfg.v_max, cfg)
    r = ground_distance(position, stop)
    if _can_turn_to(heading, bearing(position, stop), speed, cfg) or r <= cfg.arrival_tol:
        return propulsion_energy(speed, cfg.v_max, cfg) + (slots - 1) * cruise
    brake = propulsion_energy(speed, 0.0, cfg)
    launch = propulsion_energy(0.0, cfg.v_max, cfg)
    return brake + launch + (slots - 2) * cruise


def compute_diffs(pose, t, cfg):
    """
    (time_diff, energy_diff) of a pose at the beginning of slot t.
    After the last slot (t = T + 1) an arrived UAV needs nothing more.
    """
    stop = _stop_of(cfg, pose.id)
    remaining_slots = cfg.horizon - t + 1
    remaining_energy = cfg.e_max - pose.energy_spent
    if remaining_slots <= 0 and ground_distance(pose.position, stop) <= cfg.arrival_tol:
        return float(remaining_slots), remaining_energy
    t_req = required_time(pose.position, pose.speed, pose.heading, stop, cfg)
    e_req = required_energy(pose.position, pose.speed, pose.heading, stop, cfg)
    return float(remaining_slots - t_req), remaining_energy - e_req


# ===========================
# Movement mask
# ===========================

def nearest_grid_option(speed_next, heading, cfg):
    """MovementOption carrying exact values and the nearest grid indices"""
    levels = np.asarray(cfg.speed_levels)
    speed_index = int(np.argmin(np.abs(levels - speed_next)))
    width = 2.0 * math.pi / cfg.n2
    heading = wrap_angle(heading)
    heading_index = int(round(heading / width)) % cfg.n2
    return MovementOption(speed_index, heading_index, float(speed_next), heading)


def forced_option(pose, t, cfg):
    """
    Predetermined movement toward the stop point.
    Turnable (or at rest): fly the exact bearing at the fastest speed that can still stop on
    the destination in the next slot; in the last slot land directly.
    Otherwise: brake to rest along the current heading.
    """
    stop = _stop_of(cfg, pose.id)
    r = ground_distance(pose.position, stop)
    v = pose.speed
    if r <= cfg.arrival_tol:
        return nearest_grid_option(0.0, pose.heading, cfg)
    target = bearing(pose.position, stop)
    if not _can_turn_to(pose.heading, target, v, cfg):
        return nearest_grid_option(0.0, pose.heading, cfg)
    if r < v * cfg.slot_len / 2.0 - POSITION_EPS:
        # too fast to stop before the destination: brake along the safe current heading
        return nearest_grid_option(0.0, pose.heading, cfg)
    if cfg.horizon - t + 1 <= 1:
        v_next = 2.0 * r / cfg.slot_len - v
    else:
        v_next = (r - v * cfg.slot_len / 2.0) / cfg.slot_len
    v_next = min(max(v_next, 0.0), cfg.v_max)
    return nearest_grid_option(v_next, target, cfg)


def _stays_inside(position, v, option, cfg):
    dx, dy = displacement(v, option.speed_next, option.heading, cfg)
    end = (position[0] + dx, position[1] + dy)
    if not inside_area(end, cfg, slack=0.0):
        return False
    # braking straight ahead in the next slot must stay inside as well
    reach = option.speed_next * cfg.slot_len / 2.0
    tail = (end[0] + reach * math.cos(option.heading), end[1] + reach * math.sin(option.heading))
    return inside_area(tail, cfg, slack=0.0)


def free_options(pose, cfg):
    options = []
    for i, v_next in enumerate(cfg.speed_levels):
        for j, heading in enumerate(cfg.heading_levels):
            if not _can_turn_to(pose.heading, heading, pose.speed, cfg):
                continue
            option = MovementOption(i, j, float(v_next), float(heading))
            if _stays_inside(pose.position, pose.speed, option, cfg):
                options.append(option)
    return tuple(options)


def movement_is_free(pose, t, cfg):
    time_diff, energy_diff = compute_diffs(pose, t, cfg)
    return time_diff > TIME_MARGIN and energy_diff > ENERGY_MARGIN * max_slot_energy(cfg)


def movement_mask(pose, t, cfg):
    """(options, forced): the grid options a UAV may take, or the single forced option"""
    if movement_is_free(pose, t, cfg):
        options = free_options(pose, cfg)
        if options:
            return options, None
    forced = forced_option(pose, t, cfg)
    return (forced,), forced


# ===========================
# Scheduling mask
# ===========================

def schedule_mask(position, sns, cfg):
    """SNs inside the coverage disk holding at least one transmission's energy, plus 0"""
    radius = coverage_radius(cfg)
    ids = {0}
    for sn in sns:
        if ground_distance(position, sn.position) <= radius and sn.battery >= cfg.e_c - ENERGY_EPS:
            ids.add(sn.id)
    return frozenset(ids)


def action_mask(state, m, cfg):
    pose = state.uavs[m]
    movements, forced = movement_mask(pose, state.t, cfg)
    return ActionMask(movements=movements, schedulable=schedule_mask(pose.position, state.sns, cfg), forced=forced)


def project_movement(speed_index, heading_index, mask, cfg):
    """Feasible option closest to a requested grid movement (speed first, then circular heading)"""
    requested_speed = cfg.speed_levels[speed_index]
    requested_heading = cfg.heading_levels[heading_index]

    def distance(option):
        return (abs(option.speed_next - requested_speed) / cfg.v_max
                + angular_distance(option.heading, requested_heading) / math.pi)

    for option in mask.movements:
        if option.speed_index == speed_index and option.heading_index == heading_index:
            return option
    return min(mask.movements, key=distance)
