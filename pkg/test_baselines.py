"""
Baselines: nearest scheduling, K-means clustering, cluster heuristic, independent DQN
"""
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from baselines import (
    ClusterAssignment,
    ClusterPolicy,
    EmptyCluster,
    IdqnLearner,
    NearestPolicy,
    idqn_train,
    kmeans_cluster,
    nearest_schedule,
    within_cluster_sse,
)
from config import load_world_config, make_rng
from decpomdp import REASON_HORIZON, Observation, UavAoiEnv, decode_action, random_masked_policy, run_episode
from feasibility import ActionMask, MovementOption, action_mask
from qmix import QmixLearner, execute
from world import sn_positions


def grid_options(cfg):
    return tuple(MovementOption(i, j, float(v), float(h))
                 for i, v in enumerate(cfg.speed_levels) for j, h in enumerate(cfg.heading_levels))


def observation(position, aoi, speed=0.0, heading=0.0):
    aoi = np.asarray(aoi, dtype=float)
    return Observation(uav=0, position=position, speed=speed, heading=heading, aoi=aoi,
                       battery=np.where(np.isnan(aoi), np.nan, 5e-3), time_diff=50.0, energy_diff=1e4)


# ===========================
# Nearest scheduling
# ===========================

def test_nearest_schedule_examples():
    positions = {1: (50.0, 0.0), 2: (80.0, 0.0), 3: (0.0, 30.0)}
    assert nearest_schedule((0.0, 0.0), frozenset({0, 1, 2}), positions) == 1
    assert nearest_schedule((0.0, 0.0), frozenset({0, 2}), positions) == 2
    assert nearest_schedule((0.0, 0.0), frozenset({0}), positions) == 0


def test_nearest_policy_schedules_the_closest_available_sn(small_cfg, tiny_hyper):
    learner = QmixLearner(small_cfg, tiny_hyper, seed=0)
    env = UavAoiEnv(small_cfg, seed=1, keep_world_states=True)
    policy = NearestPolicy(small_cfg, learner)
    policy.reset()
    record = run_episode(env, policy)
    positions = {i + 1: p for i, p in enumerate(sn_positions(small_cfg))}
    for k, state in enumerate(record.world_states[:len(record)]):
        for m, pose in enumerate(state.uavs):
            mask = action_mask(state, m, small_cfg)
            assert record.schedules[k][m] == nearest_schedule(pose.position, mask.schedulable, positions)


# ===========================
# K-means
# ===========================

def lloyd(points, starts, max_iter=100):
    """Plain Lloyd iterations for comparison"""
    centroids = np.array(starts, dtype=float)
    labels = np.argmin(((points[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    for _ in range(max_iter):
        centroids = np.array([points[labels == c].mean(axis=0) if np.any(labels == c) else centroids[c]
                              for c in range(len(centroids))])
        new = np.argmin(((points[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    return tuple(int(c) + 1 for c in labels)


def test_singleton_clusters():
    starts = [(0.0, 0.0), (400.0, 0.0), (800.0, 0.0)]
    points = [(10.0, 10.0), (410.0, 5.0), (790.0, 20.0)]
    assignment = kmeans_cluster(points, starts)
    assert assignment.labels == (1, 2, 3)
    assert assignment.members(2) == [2]


def test_co_located_sns_join_the_lowest_nearest_uav():
    starts = [(100.0, 0.0), (300.0, 0.0)]
    points = [(200.0, 50.0)] * 4
    assignment = kmeans_cluster(points, starts)
    assert assignment.labels == (1, 1, 1, 1)


def test_matches_plain_lloyd(cfg):
    points = np.asarray(sn_positions(cfg))
    assignment = kmeans_cluster(points, cfg.start_positions)
    assert assignment.labels == lloyd(points, cfg.start_positions)


def test_fewer_sns_than_uavs():
    with pytest.raises(EmptyCluster):
        kmeans_cluster([(0.0, 0.0)], [(0.0, 0.0), (10.0, 0.0)])


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_within_cluster_error_never_grows(seed):
    rng = make_rng(seed, 0)
    points = rng.uniform(0, 800, size=(15, 2))
    starts = [(0.0, 0.0), (360.0, 0.0), (760.0, 0.0)]
    history = []
    assignment = kmeans_cluster(points, starts, history=history)
    assert all(b <= a + 1e-6 for a, b in zip(history, history[1:]))
    assert within_cluster_sse(points, assignment.labels, assignment.centroids) == pytest.approx(history[-1])
    assert set(assignment.labels) <= {1, 2, 3}


# ===========================
# Cluster heuristic
# ===========================

@pytest.fixture
def lone_cluster_cfg():
    return load_world_config(num_sns=3, num_uavs=1, horizon=25, area_side=200.0)


def cluster_policy(cfg):
    assignment = ClusterAssignment(labels=(1, 1, 1), centroids=((100.0, 100.0),))
    policy = ClusterPolicy(cfg, assignment=assignment)
    policy.reset()
    return policy


def test_schedules_the_stalest_covered_sn(lone_cluster_cfg):
    policy = cluster_policy(lone_cluster_cfg)
    mask = ActionMask(movements=grid_options(lone_cluster_cfg), schedulable=frozenset({0, 1, 2}))
    action = decode_action(policy.step(0, observation((0.0, 0.0), [9, 4, math.nan]), mask), lone_cluster_cfg)
    assert action.schedule == 1


def test_chases_the_stalest_member_at_full_speed(lone_cluster_cfg):
    cfg = lone_cluster_cfg
    policy = cluster_policy(cfg)
    policy.positions = ((100.0, 0.0), (0.0, 150.0), (150.0, 150.0))
    mask = ActionMask(movements=grid_options(cfg), schedulable=frozenset({0}))
    action = decode_action(policy.step(0, observation((0.0, 0.0), [9.0, 2.0, 3.0]), mask), cfg)
    assert (action.speed_index, action.heading_index) == (cfg.n1, 0)


def test_forced_movement_wins_but_scheduling_stays_greedy(lone_cluster_cfg):
    cfg = lone_cluster_cfg
    policy = cluster_policy(cfg)
    forced = MovementOption(0, 3, 0.0, math.pi)
    mask = ActionMask(movements=(forced,), schedulable=frozenset({0, 2, 3}), forced=forced)
    action = decode_action(policy.step(0, observation((0.0, 0.0), [9.0, 2.0, 3.0]), mask), cfg)
    assert (action.speed_index, action.heading_index) == (0, 3)
    assert action.schedule == 3


def test_unobserved_estimates_age(lone_cluster_cfg):
    policy = cluster_policy(lone_cluster_cfg)
    mask = ActionMask(movements=grid_options(lone_cluster_cfg), schedulable=frozenset({0}))
    policy.step(0, observation((0.0, 0.0), [5.0, math.nan, math.nan]), mask)
    policy.step(0, observation((0.0, 0.0), [math.nan, math.nan, math.nan]), mask)
    assert policy.estimates[0].tolist() == [6.0, 3.0, 3.0]


def test_cluster_episode_is_feasible(small_cfg):
    policy = ClusterPolicy(small_cfg)
    policy.reset()
    record = run_episode(UavAoiEnv(small_cfg, seed=2), policy)
    assert record.reason == REASON_HORIZON
    assert len(record) == small_cfg.horizon


# ===========================
# Independent DQN
# ===========================

def test_idqn_has_one_network_per_uav(small_cfg, tiny_hyper):
    learner = IdqnLearner(small_cfg, tiny_hyper, seed=0)
    assert len(learner.agents) == small_cfg.num_uavs
    assert learner.agents[0].fc1.weight.data_ptr() != learner.agents[1].fc1.weight.data_ptr()


def test_idqn_terminal_targets_are_costs(small_cfg, tiny_hyper):
    learner = IdqnLearner(small_cfg, replace(tiny_hyper, cost_scale=1.0), seed=0, dtype=torch.float64)
    record = execute(learner, UavAoiEnv(small_cfg, seed=0))
    targets = learner.td_targets(learner.batch([record]))
    assert targets[0, len(record) - 1].tolist() == [record.costs[-1]] * small_cfg.num_uavs


def test_idqn_training_runs(small_cfg, tiny_hyper):
    learner, curve = idqn_train(small_cfg, tiny_hyper, seed=0, progress=False)
    assert learner.algorithm == "idqn"
    assert len(curve) == tiny_hyper.episodes
    assert learner.updates == tiny_hyper.episodes


def test_single_uav_qmix_and_idqn_act_alike(tiny_hyper):
    cfg = load_world_config(num_sns=3, num_uavs=1, horizon=25, area_side=200.0)
    qmix = QmixLearner(cfg, tiny_hyper, seed=0)
    idqn = IdqnLearner(cfg, tiny_hyper, seed=0)
    idqn.agents[0].load_state_dict(qmix.agent.state_dict())
    first = execute(qmix, UavAoiEnv(cfg, seed=6), episode=1)
    second = execute(idqn, UavAoiEnv(cfg, seed=6), episode=1)
    assert first.costs == second.costs
    assert [a.tolist() for a in first.actions] == [a.tolist() for a in second.actions]


def make_identity_mixer(mixer, offset=1000.0):
    """State-independent weights so Q_tot equals the single agent's utility"""
    with torch.no_grad():
        for p in mixer.parameters():
            p.zero_()
        mixer.hyper_w1.bias.fill_(1.0)
        mixer.hyper_b1.bias.fill_(offset)
        mixer.hyper_w2.bias.fill_(1.0 / mixer.embed_dim)
        mixer.hyper_b2[2].bias.fill_(-offset)


def test_single_uav_qmix_and_idqn_learn_alike(tiny_hyper):
    cfg = load_world_config(num_sns=3, num_uavs=1, horizon=25, area_side=200.0)
    hyper = replace(tiny_hyper, cost_scale=0.0, grad_clip=1e9)
    qmix = QmixLearner(cfg, hyper, seed=0, dtype=torch.float64)
    make_identity_mixer(qmix.mixer)
    qmix.target_sync()
    idqn = IdqnLearner(cfg, hyper, seed=0, dtype=torch.float64)
    idqn.agents[0].load_state_dict(qmix.agent.state_dict())
    idqn.target_sync()

    policy = random_masked_policy(make_rng(6, 1))
    records = [run_episode(UavAoiEnv(cfg, seed=6), policy, episode=k) for k in range(2)]
    batch = qmix.batch(records)
    chosen = torch.gather(qmix.unroll(qmix.agent, batch), -1, batch["action"].unsqueeze(-1))[..., 0, 0]
    assert torch.allclose(qmix.q_total(batch), chosen, atol=1e-9)

    assert qmix.train_step(records) == pytest.approx(idqn.train_step(records), rel=1e-9)
    for a, b in zip(qmix.agent.parameters(), idqn.agents[0].parameters()):
        assert torch.allclose(a, b, rtol=0.0, atol=1e-10)
