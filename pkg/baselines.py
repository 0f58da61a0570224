"""
Comparison policies
- nearest scheduling with learned QMIX movement
- K-means cluster heuristic
- independent DQN (per-agent recurrent nets, no mixer)
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from decpomdp import AgentAction, encode_action, mask_vector
from qmix import AgentNet, RecurrentLearner, masked_min, train
from world import displacement, ground_distance, sn_positions

KMEANS_MAX_ITER = 100


class EmptyCluster(RuntimeError):
    """A K-means centroid lost all its points"""


# ===========================
# Nearest scheduling
# ===========================

def nearest_schedule(position, schedulable, positions_by_id):
    """Closest schedulable SN by ground distance (lowest id on ties); 0 when none"""
    best, best_distance = 0, math.inf
    for n in sorted(schedulable):
        if n == 0:
            continue
        d = ground_distance(position, positions_by_id[n])
        if d < best_distance:
            best, best_distance = n, d
    return best


class NearestPolicy:
    """Schedules the nearest SN; the trajectory comes from a trained QMIX agent network"""

    name = "nearest"

    def __init__(self, cfg, learner):
        self.cfg = cfg
        self.learner = learner
        self.positions = {i + 1: p for i, p in enumerate(sn_positions(cfg))}
        self.hidden = None
        self.prev_actions = None

    def reset(self):
        self.hidden = self.learner.init_hidden(1)
        self.prev_actions = None

    def __call__(self, observations, masks, env):
        cfg = self.cfg
        obs = torch.as_tensor(np.stack([o.as_vector(cfg) for o in observations]), dtype=self.learner.dtype)
        prev = torch.zeros(cfg.num_uavs, cfg.num_actions, dtype=self.learner.dtype)
        if self.prev_actions is not None:
            prev[torch.arange(cfg.num_uavs), torch.as_tensor(self.prev_actions)] = 1.0
        with torch.no_grad():
            q, self.hidden = self.learner.agent_step(
                self.learner.acting_nets(), torch.cat([obs, prev], dim=-1).unsqueeze(0), self.hidden
            )
        q = q[0].numpy()
        actions = []
        for m, (obs_m, mask) in enumerate(zip(observations, masks)):
            target = nearest_schedule(obs_m.position, mask.schedulable, self.positions)
            allowed = mask_vector(mask, cfg)
            # keep only movements paired with the chosen schedule
            allowed &= (np.arange(cfg.num_actions) % (cfg.num_sns + 1)) == target
            actions.append(int(np.argmin(np.where(allowed, q[m], np.inf))))
        self.prev_actions = actions
        return actions


# ===========================
# K-means clustering
# ===========================

@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple       # per SN (in SN order), cluster id 1..M
    centroids: tuple    # per cluster (x, y)
    iterations: int = 0

    def members(self, cluster_id):
        return [i + 1 for i, c in enumerate(self.labels) if c == cluster_id]


def _assign(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1), d2


def within_cluster_sse(points, labels, centroids):
    points = np.asarray(points, dtype=float)
    centroids = np.asarray(centroids, dtype=float)
    index = np.asarray(labels) - 1
    return float(((points - centroids[index]) ** 2).sum())


def kmeans_cluster(points, starts, max_iter=KMEANS_MAX_ITER, history=None):
    """
    Lloyd iterations seeded at the UAV start positions.
    Ties go to the lowest UAV id; a centroid left empty is re-seeded on the SN
    farthest from its own centroid. Stops when assignments no longer change.
    history, when given, collects the within-cluster SSE after every update.
    """
    points = np.asarray(points, dtype=float)
    centroids = np.asarray(starts, dtype=float).copy()
    k = centroids.shape[0]
    if points.shape[0] < k:
        raise EmptyCluster(f"{points.shape[0]} SNs cannot fill {k} clusters")

    labels, _ = _assign(points, centroids)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for c in range(k):
            if np.any(labels == c):
                centroids[c] = points[labels == c].mean(axis=0)
        for c in range(k):
            if np.any(labels == c):
                continue
            own = ((points - centroids[labels]) ** 2).sum(axis=1)
            far = int(np.argmax(own))
            # co-located SNs leave nothing to split off
            if own[far] > 0.0:
                centroids[c] = points[far]
                labels[far] = c
        if history is not None:
            history.append(within_cluster_sse(points, labels + 1, centroids))
        new_labels, _ = _assign(points, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterAssignment(
        labels=tuple(int(c) + 1 for c in labels),
        centroids=tuple((float(x), float(y)) for x, y in centroids),
        iterations=iterations,
    )


# ===========================
# Cluster heuristic
# ===========================

class ClusterPolicy:
    """
    Each UAV chases the stalest SN of its cluster and schedules the stalest
    schedulable SN in coverage. AoI of unobserved SNs is tracked as an estimate
    (last observed value, aged by one per slot).
    """

    name = "cluster"

    def __init__(self, cfg, assignment=None, any_coverage=False):
        self.cfg = cfg
        self.positions = sn_positions(cfg)
        self.assignment = assignment or kmeans_cluster(self.positions, cfg.start_positions)
        self.any_coverage = any_coverage
        self.estimates = None

    def reset(self):
        self.estimates = np.full((self.cfg.num_uavs, self.cfg.num_sns), float(self.cfg.initial_aoi))

    def _update_estimates(self, m, obs):
        seen = obs.observed()
        aged = np.minimum(self.estimates[m] + 1.0, self.cfg.delta_max)
        self.estimates[m] = np.where(seen, obs.aoi, aged)

    def target_sn(self, m):
        members = self.assignment.members(m + 1)
        if not members:
            return None
        values = [self.estimates[m][n - 1] for n in members]
        return members[int(np.argmax(values))]

    def step(self, m, obs, mask):
        cfg = self.cfg
        self._update_estimates(m, obs)

        target = self.target_sn(m)
        if mask.forced is not None or target is None:
            option = mask.movements[0]
        else:
            goal = self.positions[target - 1]

            def distance_after(option):
                dx, dy = displacement(obs.speed, option.speed_next, option.heading, cfg)
                return ground_distance((obs.position[0] + dx, obs.position[1] + dy), goal)

            option = min(mask.movements, key=lambda o: (distance_after(o), o.speed_index, o.heading_index))

        own = set(self.assignment.members(m + 1))
        candidates = [n for n in sorted(mask.schedulable)
                      if n != 0 and (self.any_coverage or n in own)]
        schedule = 0
        if candidates:
            schedule = max(candidates, key=lambda n: (obs.aoi[n - 1], -n))
        return encode_action(AgentAction(option.speed_index, option.heading_index, schedule), cfg)

    def __call__(self, observations, masks, env):
        return [self.step(m, obs, mask) for m, (obs, mask) in enumerate(zip(observations, masks))]


# ===========================
# Independent DQN
# ===========================

class IdqnLearner(RecurrentLearner):
    """One recurrent Q-network and target per UAV, each trained on its own TD error"""

    algorithm = "idqn"

    def _build(self):
        h = self.hyper
        self.agents = nn.ModuleList(
            AgentNet(self.input_dim, self.n_actions, h.rnn_hidden) for _ in range(self.n_agents)
        ).to(self.dtype)
        self.target_agents = nn.ModuleList(
            AgentNet(self.input_dim, self.n_actions, h.rnn_hidden) for _ in range(self.n_agents)
        ).to(self.dtype)
        self.target_sync()

    def parameters(self):
        return list(self.agents.parameters())

    def modules(self):
        return {"agents": self.agents, "target_agents": self.target_agents}

    def acting_nets(self):
        return self.agents

    def target_sync(self):
        self.target_agents.load_state_dict(self.agents.state_dict())

    def td_targets(self, batch):
        """Per-agent y_m = scaled cost + min over masked next actions of the agent's target q"""
        with torch.no_grad():
            costs = (batch["cost"] * self.cost_scale).unsqueeze(-1).expand(-1, -1, self.n_agents)
            target_q = self.unroll(self.target_agents, batch)
            next_min = masked_min(target_q[:, 1:], self.target_masks(batch)[:, 1:])
            targets = costs.clone()
            targets[:, :-1] += (1.0 - batch["terminal"][:, :-1]).unsqueeze(-1) * next_min
        return targets

    def loss(self, batch):
        q = self.unroll(self.agents, batch)
        chosen = torch.gather(q, dim=-1, index=batch["action"].unsqueeze(-1)).squeeze(-1)
        filled = batch["filled"].unsqueeze(-1)
        td = (chosen - self.td_targets(batch)) * filled
        return (td ** 2).sum() / (filled.sum() * self.n_agents)


def idqn_train(cfg, hyper, seed, storage=None, progress=None):
    """Independent learners with the same masks, epsilon schedule, replay and optimizer as QMIX"""
    return train(cfg, hyper, seed, learner=IdqnLearner(cfg, hyper, seed), storage=storage, progress=progress)
