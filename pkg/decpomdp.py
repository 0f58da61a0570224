"""
Episodic Dec-POMDP wrapper around the world
Observations, flat action codec, shared cost, the episode loop with its
termination rules, episode records (JSON lines) and trajectory traces.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import ROLE_ENV, make_rng
from feasibility import action_mask, project_movement
from world import UavControl, coverage_radius, ground_distance, initial_state, world_step

RECORD_SCHEMA_VERSION = 1
SENTINEL = -1.0

REASON_COLLISION = "collision"
REASON_HORIZON = "horizon"


class MaskViolation(RuntimeError):
    """An agent picked an action outside its mask"""


class ArrivalViolation(RuntimeError):
    """A UAV was not at its stop point after the last slot"""


# ===========================
# Action codec
# ===========================

@dataclass(frozen=True)
class AgentAction:
    speed_index: int
    heading_index: int
    schedule: int


def encode_action(action, cfg):
    if not (0 <= action.speed_index <= cfg.n1 and 0 <= action.heading_index < cfg.n2
            and 0 <= action.schedule <= cfg.num_sns):
        raise ValueError(f"Action {action} outside the action grid")
    return (action.speed_index * cfg.n2 + action.heading_index) * (cfg.num_sns + 1) + action.schedule


def decode_action(index, cfg):
    if not 0 <= index < cfg.num_actions:
        raise ValueError(f"Action index {index} outside [0, {cfg.num_actions})")
    movement, schedule = divmod(int(index), cfg.num_sns + 1)
    speed_index, heading_index = divmod(movement, cfg.n2)
    return AgentAction(speed_index, heading_index, schedule)


def mask_vector(mask, cfg):
    """Boolean vector over flat actions allowed by an ActionMask"""
    allowed = np.zeros(cfg.num_actions, dtype=bool)
    schedules = sorted(mask.schedulable)
    for option in mask.movements:
        base = (option.speed_index * cfg.n2 + option.heading_index) * (cfg.num_sns + 1)
        allowed[[base + b for b in schedules]] = True
    return allowed


def control_for(action, mask, cfg):
    """Physical control of an in-mask action; forced masks carry exact speed and heading"""
    for option in mask.movements:
        if option.speed_index == action.speed_index and option.heading_index == action.heading_index:
            return UavControl(option.speed_next, option.heading, action.schedule)
    raise MaskViolation(f"Movement ({action.speed_index}, {action.heading_index}) not in mask")


def project_action(action, mask, cfg):
    """Closest feasible action for learners acting without the mask"""
    option = project_movement(action.speed_index, action.heading_index, mask, cfg)
    schedule = action.schedule if action.schedule in mask.schedulable else 0
    return AgentAction(option.speed_index, option.heading_index, schedule)


# ===========================
# Observations and state features
# ===========================

@dataclass(frozen=True)
class Observation:
    """Raw local view of one UAV; unobserved SN entries are NaN"""

    uav: int
    position: tuple
    speed: float
    heading: float
    aoi: np.ndarray
    battery: np.ndarray
    time_diff: float
    energy_diff: float

    def observed(self):
        return ~np.isnan(self.aoi)

    def as_vector(self, cfg):
        """Normalized features with sentinel -1 for unobserved SNs, plus the agent one-hot"""
        span = max(cfg.delta_max - 1, 1)
        aoi = np.where(np.isnan(self.aoi), SENTINEL, (self.aoi - 1.0) / span)
        battery = np.where(np.isnan(self.battery), SENTINEL, self.battery / cfg.e_sn_max)
        agent = np.zeros(cfg.num_uavs)
        agent[self.uav] = 1.0
        own = [
            self.position[0] / cfg.area_side,
            self.position[1] / cfg.area_side,
            self.speed / cfg.v_max,
            self.heading / (2.0 * math.pi),
            self.time_diff / cfg.horizon,
            self.energy_diff / cfg.e_max,
        ]
        return np.concatenate([own, aoi, battery, agent]).astype(np.float32)


def observation_dim(cfg):
    return 6 + 2 * cfg.num_sns + cfg.num_uavs


def state_dim(cfg):
    return 6 * cfg.num_uavs + 2 * cfg.num_sns + 1


def observe(state, m, cfg):
    pose = state.uavs[m]
    radius = coverage_radius(cfg)
    aoi = np.full(cfg.num_sns, np.nan)
    battery = np.full(cfg.num_sns, np.nan)
    for i, sn in enumerate(state.sns):
        if ground_distance(pose.position, sn.position) <= radius:
            aoi[i] = sn.aoi
            battery[i] = sn.battery
    return Observation(
        uav=m,
        position=pose.position,
        speed=pose.speed,
        heading=pose.heading,
        aoi=aoi,
        battery=battery,
        time_diff=pose.time_diff,
        energy_diff=pose.energy_diff,
    )


def state_vector(state, cfg):
    """Global state features fed to the mixing network during training"""
    span = max(cfg.delta_max - 1, 1)
    parts = []
    for pose in state.uavs:
        parts.extend([
            pose.position[0] / cfg.area_side,
            pose.position[1] / cfg.area_side,
            pose.speed / cfg.v_max,
            pose.heading / (2.0 * math.pi),
            pose.time_diff / cfg.horizon,
            pose.energy_diff / cfg.e_max,
        ])
    parts.extend((state.aoi - 1.0) / span)
    parts.extend(state.batteries / cfg.e_sn_max)
    parts.append(min(state.t, cfg.horizon) / cfg.horizon)
    return np.asarray(parts, dtype=np.float32)


# ===========================
# Cost and objective
# ===========================

def cost(state_after, collision, cfg):
    total = float(state_after.aoi.sum())
    if collision:
        total += cfg.collision_penalty
    return total


@dataclass
class EpisodeRecord:
    """Per-slot decision data of one episode, in the arrays the learners consume"""

    observations: list = field(default_factory=list)   # [M, obs_dim] per slot
    states: list = field(default_factory=list)         # state features per slot
    masks: list = field(default_factory=list)          # [M, |A|] per slot
    actions: list = field(default_factory=list)        # [M] chosen flat actions
    executed: list = field(default_factory=list)       # [M] after mask projection
    costs: list = field(default_factory=list)
    aoi_sums: list = field(default_factory=list)       # sum of AoI after each slot
    schedules: list = field(default_factory=list)
    successes: list = field(default_factory=list)
    world_states: list = field(default_factory=list)   # kept only for traces
    reason: str = None
    final_state: object = None
    seed: int = None
    episode: int = None

    def __len__(self):
        return len(self.costs)

    @property
    def cumulative_cost(self):
        return float(np.sum(self.costs))

    @property
    def collided(self):
        return self.reason == REASON_COLLISION

    def arrays(self):
        return {
            "obs": np.stack(self.observations),
            "state": np.stack(self.states),
            "mask": np.stack(self.masks),
            "action": np.asarray(self.actions, dtype=np.int64),
            "cost": np.asarray(self.costs, dtype=np.float64),
        }

    def compact(self):
        """Copy without world snapshots, for replay storage"""
        return EpisodeRecord(
            observations=self.observations, states=self.states, masks=self.masks,
            actions=self.actions, executed=self.executed, costs=self.costs, aoi_sums=self.aoi_sums,
            schedules=self.schedules, successes=self.successes, reason=self.reason,
            final_state=self.final_state, seed=self.seed, episode=self.episode,
        )


def objective(records, cfg):
    """
    Time-average total AoI, averaged over episodes.
    Episodes cut short by a collision average over the slots actually flown.
    """
    if not records:
        raise ValueError("objective needs at least one episode")
    return float(np.mean([np.sum(r.aoi_sums) / max(len(r.aoi_sums), 1) for r in records]))


def residual_energy(record, cfg):
    """Mean remaining UAV battery at the end of an episode"""
    uavs = record.final_state.uavs
    return float(np.mean([cfg.e_max - p.energy_spent for p in uavs]))


# ===========================
# Environment
# ===========================

class UavAoiEnv:
    """
    Dec-POMDP episode runner.
    strict=True: actions outside the mask raise MaskViolation.
    strict=False: actions are projected onto the mask before execution.
    """

    def __init__(self, cfg, seed, strict=True, keep_world_states=False):
        self.cfg = cfg
        self.seed = int(seed)
        self.strict = strict
        self.keep_world_states = keep_world_states
        self.state = None
        self.record = None
        self.current_masks = None
        self.current_observations = None
        self.done = True
        self._rng = None

    def reset(self, episode=0):
        stream = (self.seed, ROLE_ENV, int(episode))
        self._rng = make_rng(*stream)
        self.state = initial_state(self.cfg, rng_stream=stream)
        self.record = EpisodeRecord(seed=self.seed, episode=int(episode))
        if self.keep_world_states:
            self.record.world_states.append(self.state)
        self.done = False
        return self._observe()

    def _observe(self):
        cfg = self.cfg
        self.current_masks = [action_mask(self.state, m, cfg) for m in range(cfg.num_uavs)]
        self.current_observations = [observe(self.state, m, cfg) for m in range(cfg.num_uavs)]
        return self.current_observations, self.current_masks

    def step(self, joint_action):
        """Execute flat actions; returns (observations, masks, cost, done, reason)"""
        cfg = self.cfg
        if self.done:
            raise RuntimeError("Episode finished; call reset()")
        if len(joint_action) != cfg.num_uavs:
            raise ValueError(f"Expected {cfg.num_uavs} actions, got {len(joint_action)}")

        executed, controls, vectors = [], [], []
        for m, index in enumerate(joint_action):
            mask = self.current_masks[m]
            allowed = mask_vector(mask, cfg)
            action = decode_action(int(index), cfg)
            if not allowed[int(index)]:
                if self.strict:
                    raise MaskViolation(f"UAV {m} at t={self.state.t}: action {action} outside its mask")
                action = project_action(action, mask, cfg)
            executed.append(encode_action(action, cfg))
            controls.append(control_for(action, mask, cfg))
            vectors.append(allowed)

        record = self.record
        record.observations.append(np.stack([o.as_vector(cfg) for o in self.current_observations]))
        record.states.append(state_vector(self.state, cfg))
        record.masks.append(np.stack(vectors))
        # learners credit the action they chose; the projection is kept for traces
        record.actions.append(np.asarray(joint_action, dtype=np.int64))
        record.executed.append(np.asarray(executed, dtype=np.int64))

        next_state, outcomes, collision = world_step(self.state, controls, self._rng, cfg)
        slot_cost = cost(next_state, collision, cfg)
        record.costs.append(slot_cost)
        record.aoi_sums.append(float(next_state.aoi.sum()))
        record.schedules.append([o.sn for o in outcomes])
        record.successes.append([o.success for o in outcomes])
        self.state = next_state
        if self.keep_world_states:
            record.world_states.append(next_state)

        reason = None
        if collision:
            reason = REASON_COLLISION
        elif next_state.t > cfg.horizon:
            reason = REASON_HORIZON
            self._assert_arrived(next_state)
        if reason is not None:
            self.done = True
            record.reason = reason
            record.final_state = next_state
            return [], [], slot_cost, True, reason
        observations, masks = self._observe()
        return observations, masks, slot_cost, False, None

    def _assert_arrived(self, state):
        for pose in state.uavs:
            stop = self.cfg.stop_positions[pose.id]
            gap = ground_distance(pose.position, stop)
            if gap > self.cfg.arrival_tol:
                raise ArrivalViolation(f"UAV {pose.id} ended {gap:.6f} m from its stop point")


def episode_step(env, joint_action):
    """Functional alias of UavAoiEnv.step"""
    return env.step(joint_action)


def run_episode(env, policy, episode=0):
    """
    Roll one episode with policy(observations, masks, env) -> list of flat actions.
    Returns the finished EpisodeRecord.
    """
    observations, masks = env.reset(episode)
    done = False
    while not done:
        actions = policy(observations, masks, env)
        observations, masks, _, done, _ = episode_step(env, actions)
    return env.record


def random_masked_policy(rng):
    """Uniform choice over each agent's masked actions"""

    def policy(observations, masks, env):
        return [int(rng.choice(np.flatnonzero(mask_vector(mask, env.cfg)))) for mask in masks]

    return policy


# ===========================
# Persistence
# ===========================

def write_record_jsonl(record, path, meta=None):
    """
    One JSON object per line: a header line with metadata, then one line per slot
    {t, actions, allowed (flat indices per UAV), cost, aoi_sum, schedules, successes}.
    """
    with open(path, "w") as fh:
        header = {"schema": RECORD_SCHEMA_VERSION, "reason": record.reason,
                  "seed": record.seed, "episode": record.episode}
        header.update(meta or {})
        fh.write(json.dumps(header) + "\n")
        for t in range(len(record)):
            line = {
                "t": t + 1,
                "actions": [int(a) for a in record.actions[t]],
                "executed": [int(a) for a in record.executed[t]],
                "allowed": [np.flatnonzero(row).tolist() for row in record.masks[t]],
                "cost": record.costs[t],
                "aoi_sum": record.aoi_sums[t],
                "schedules": [int(b) for b in record.schedules[t]],
                "successes": [bool(s) for s in record.successes[t]],
            }
            fh.write(json.dumps(line) + "\n")


def read_record_jsonl(path):
    """(header, slots) of a record file"""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("schema") != RECORD_SCHEMA_VERSION:
        raise ValueError(f"{path} is not a version-{RECORD_SCHEMA_VERSION} episode record")
    return lines[0], lines[1:]


def trace_frame(record, cfg):
    """Per-slot trajectory/scheduling table of a record kept with world states"""
    if not record.world_states:
        raise ValueError("Trace export needs an episode run with keep_world_states=True")
    rows = []
    for k, state in enumerate(record.world_states):
        row = {"t": state.t}
        for pose in state.uavs:
            row[f"uav{pose.id}_x"] = pose.position[0]
            row[f"uav{pose.id}_y"] = pose.position[1]
            row[f"uav{pose.id}_v"] = pose.speed
            row[f"uav{pose.id}_heading"] = pose.heading
            # schedule chosen in this slot; none after the last slot
            row[f"uav{pose.id}_b"] = record.schedules[k][pose.id] if k < len(record.schedules) else 0
        for sn in state.sns:
            row[f"sn{sn.id}_aoi"] = sn.aoi
            row[f"sn{sn.id}_energy"] = sn.battery
        rows.append(row)
    return pd.DataFrame(rows)
