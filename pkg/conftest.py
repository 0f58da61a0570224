"""
Shared pytest fixtures
Banner output is silenced before any project module reads VERBOSE.
"""
import json
import os
from pathlib import Path

os.environ.setdefault("UAV_AOI_VERBOSE", "False")

import pytest

from config import load_qmix_hyper, load_world_config

ORACLES_FILE = Path(__file__).with_name("physics_oracles.json")


@pytest.fixture(scope="session")
def oracles():
    return json.loads(ORACLES_FILE.read_text())


@pytest.fixture(scope="session")
def cfg():
    """Default scenario: N=15, M=3, T=100, 800 m square"""
    return load_world_config()


@pytest.fixture(scope="session")
def small_cfg():
    """Two UAVs, three SNs, 200 m square, 17 slots of travel in a 25-slot horizon"""
    return load_world_config(num_sns=3, num_uavs=2, horizon=25, area_side=200.0)


@pytest.fixture(scope="session")
def tiny_hyper():
    """Small networks and short runs for learner tests"""
    return load_qmix_hyper(
        episodes=4,
        replay_capacity=16,
        target_sync_every=2,
        batch_size=2,
        rnn_hidden=16,
        mixer_hidden=8,
        hyper_hidden=8,
        warmup_episodes=1,
        checkpoint_every=0,
        eps_decrement=1e-3,
    )
