"""
QMIX learner for the multi-UAV AoI Dec-POMDP
Centralized training with a state-conditioned monotonic mixer, decentralized
greedy execution from local observations. Costs are minimized throughout.
"""
import time
from collections import deque

import numpy as np
import pandas as pd
import torch
from torch import nn
import torch.nn.functional as F
from tqdm import tqdm

from config import ROLE_INIT, ROLE_POLICY, ROLE_REPLAY, VERBOSE, make_rng
from decpomdp import UavAoiEnv, mask_vector, observation_dim, state_dim


class EmptyMask(RuntimeError):
    """No action available to an agent"""


class TrainingDiverged(RuntimeError):
    """The TD loss became NaN or infinite"""


# ===========================
# Networks
# ===========================

class AgentNet(nn.Module):
    """Recurrent per-agent utility: fc -> GRU cell -> q over flat actions"""

    def __init__(self, input_dim, n_actions, hidden_dim):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.rnn = nn.GRUCell(hidden_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, n_actions)

    def init_hidden(self, batch_size):
        weight = self.fc1.weight
        return weight.new_zeros(batch_size, self.hidden_dim)

    def forward(self, inputs, hidden):
        x = F.relu(self.fc1(inputs))
        h = self.rnn(x, hidden)
        return self.fc2(h), h


class MixerNet(nn.Module):
    """
    Mixes per-agent utilities into Q_tot with weights produced from the global state.
    Weights pass through abs() so Q_tot is non-decreasing in every agent utility.
    """

    def __init__(self, n_agents, state_dim, embed_dim, hyper_hidden):
        super().__init__()
        self.n_agents = n_agents
        self.embed_dim = embed_dim
        self.hyper_w1 = nn.Linear(state_dim, embed_dim * n_agents)
        self.hyper_b1 = nn.Linear(state_dim, embed_dim)
        self.hyper_w2 = nn.Linear(state_dim, embed_dim)
        self.hyper_b2 = nn.Sequential(
            nn.Linear(state_dim, hyper_hidden),
            nn.ReLU(),
            nn.Linear(hyper_hidden, 1),
        )

    def forward(self, agent_qs, states):
        lead = agent_qs.shape[:-1]
        qs = agent_qs.reshape(-1, 1, self.n_agents)
        states = states.reshape(-1, states.shape[-1])
        w1 = torch.abs(self.hyper_w1(states)).view(-1, self.n_agents, self.embed_dim)
        b1 = self.hyper_b1(states).view(-1, 1, self.embed_dim)
        hidden = F.relu(torch.bmm(qs, w1) + b1)
        w2 = torch.abs(self.hyper_w2(states)).view(-1, self.embed_dim, 1)
        b2 = self.hyper_b2(states).view(-1, 1, 1)
        q_tot = torch.bmm(hidden, w2) + b2
        return q_tot.view(*lead)


# ===========================
# Replay
# ===========================

class ReplayMemory:
    """FIFO store of whole episodes"""

    def __init__(self, capacity, rng):
        self.memory = deque(maxlen=capacity)
        self.rng = rng

    def push(self, record):
        self.memory.append(record)

    def sample(self, batch_size):
        size = min(batch_size, len(self.memory))
        picks = self.rng.choice(len(self.memory), size=size, replace=False)
        return [self.memory[i] for i in sorted(picks)]

    def __len__(self):
        return len(self.memory)


# ===========================
# Action selection
# ===========================

def masked_epsilon_greedy(q, allowed, epsilon, rng):
    """Uniform over allowed actions w.p. epsilon, else the allowed argmin (lowest index on ties)"""
    allowed = np.asarray(allowed, dtype=bool)
    candidates = np.flatnonzero(allowed)
    if candidates.size == 0:
        raise EmptyMask("No allowed action")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(candidates))
    q = np.asarray(q, dtype=np.float64)
    return int(np.argmin(np.where(allowed, q, np.inf)))


# ===========================
# Batching
# ===========================

def episode_batch(records, n_actions, dtype=torch.float32):
    """Pad episodes to a common length; padded slots get all-true masks and zero costs"""
    arrays = [r.arrays() for r in records]
    size = len(arrays)
    length = max(a["cost"].shape[0] for a in arrays)
    n_agents, obs_dim = arrays[0]["obs"].shape[1:]
    state_size = arrays[0]["state"].shape[1]

    obs = np.zeros((size, length, n_agents, obs_dim), dtype=np.float64)
    state = np.zeros((size, length, state_size), dtype=np.float64)
    mask = np.ones((size, length, n_agents, n_actions), dtype=bool)
    action = np.zeros((size, length, n_agents), dtype=np.int64)
    cost = np.zeros((size, length), dtype=np.float64)
    filled = np.zeros((size, length), dtype=np.float64)
    terminal = np.zeros((size, length), dtype=np.float64)
    for i, a in enumerate(arrays):
        n = a["cost"].shape[0]
        obs[i, :n] = a["obs"]
        state[i, :n] = a["state"]
        mask[i, :n] = a["mask"]
        action[i, :n] = a["action"]
        cost[i, :n] = a["cost"]
        filled[i, :n] = 1.0
        terminal[i, n - 1] = 1.0

    def tensor(x):
        return torch.as_tensor(x, dtype=dtype)

    return {
        "obs": tensor(obs),
        "state": tensor(state),
        "mask": torch.as_tensor(mask),
        "action": torch.as_tensor(action),
        "cost": tensor(cost),
        "filled": tensor(filled),
        "terminal": tensor(terminal),
    }


def previous_action_onehot(actions, n_actions, dtype):
    """One-hot of the action taken in the previous slot; zeros in the first slot"""
    onehot = F.one_hot(actions, num_classes=n_actions).to(dtype)
    prev = torch.zeros_like(onehot)
    prev[:, 1:] = onehot[:, :-1]
    return prev


def masked_min(q, mask):
    return q.masked_fill(~mask, float("inf")).min(dim=-1).values


# ===========================
# Learner
# ===========================

class RecurrentLearner:
    """
    Shared machinery of the recurrent value learners: acting, unrolling,
    replayed mini-batches, target networks, checkpoint state.
    Subclasses build the networks and the TD loss.
    """

    algorithm = "base"

    def __init__(self, cfg, hyper, seed, dtype=torch.float32):
        self.cfg = cfg
        self.hyper = hyper
        self.seed = int(seed)
        self.dtype = dtype
        self.n_agents = cfg.num_uavs
        self.n_actions = cfg.num_actions
        self.obs_dim = observation_dim(cfg)
        self.state_dim = state_dim(cfg)
        self.input_dim = self.obs_dim + self.n_actions
        self.cost_scale = hyper.cost_scale if hyper.cost_scale > 0 else 1.0 / (cfg.num_sns * cfg.delta_max)
        self.env_steps = 0
        self.updates = 0
        self.episodes_seen = 0
        # policy and replay generator states at the last finished episode
        self.rng_state = None

        init_seed = int(make_rng(seed, ROLE_INIT).integers(2 ** 31 - 1))
        torch.manual_seed(init_seed)
        self._build()
        self.optimizer = torch.optim.Adam(self.parameters(), lr=hyper.learning_rate)

    # --- subclass hooks ---
    def _build(self):
        raise NotImplementedError

    def parameters(self):
        raise NotImplementedError

    def loss(self, batch):
        raise NotImplementedError

    def target_sync(self):
        raise NotImplementedError

    def modules(self):
        """name -> nn.Module, for checkpoints"""
        raise NotImplementedError

    # --- forward passes ---
    def agent_step(self, nets, inputs, hidden):
        """inputs [B, M, in], hidden [B, M, H] -> q [B, M, A], hidden [B, M, H]"""
        size = inputs.shape[0]
        if isinstance(nets, nn.ModuleList):
            outs = [nets[m](inputs[:, m], hidden[:, m]) for m in range(self.n_agents)]
            return torch.stack([o[0] for o in outs], dim=1), torch.stack([o[1] for o in outs], dim=1)
        q, h = nets(inputs.reshape(size * self.n_agents, -1), hidden.reshape(size * self.n_agents, -1))
        return q.view(size, self.n_agents, -1), h.view(size, self.n_agents, -1)

    def init_hidden(self, batch_size):
        return torch.zeros(batch_size, self.n_agents, self.hyper.rnn_hidden, dtype=self.dtype)

    def unroll(self, nets, batch):
        """Per-slot q-values [B, L, M, A] of whole episodes, hidden state zeroed at slot 1"""
        obs, actions = batch["obs"], batch["action"]
        size, length = obs.shape[:2]
        prev = previous_action_onehot(actions, self.n_actions, self.dtype)
        hidden = self.init_hidden(size)
        qs = []
        for t in range(length):
            inputs = torch.cat([obs[:, t], prev[:, t]], dim=-1)
            q, hidden = self.agent_step(nets, inputs, hidden)
            qs.append(q)
        return torch.stack(qs, dim=1)

    def target_masks(self, batch):
        if self.hyper.use_action_mask:
            return batch["mask"]
        return torch.ones_like(batch["mask"])

    # --- acting ---
    def select_actions(self, observations, masks, hidden, prev_actions, epsilon, rng):
        """
        Decentralized action choice: each agent sees only its own observation.
        Returns (flat actions, next hidden).
        """
        obs = torch.as_tensor(np.stack([o.as_vector(self.cfg) for o in observations]), dtype=self.dtype)
        prev = torch.zeros(self.n_agents, self.n_actions, dtype=self.dtype)
        if prev_actions is not None:
            prev[torch.arange(self.n_agents), torch.as_tensor(prev_actions)] = 1.0
        inputs = torch.cat([obs, prev], dim=-1).unsqueeze(0)
        with torch.no_grad():
            q, hidden = self.agent_step(self.acting_nets(), inputs, hidden)
        q = q[0].numpy()
        actions = []
        for m, mask in enumerate(masks):
            if self.hyper.use_action_mask:
                allowed = mask_vector(mask, self.cfg)
            else:
                allowed = np.ones(self.n_actions, dtype=bool)
            actions.append(masked_epsilon_greedy(q[m], allowed, epsilon, rng))
        return actions, hidden

    def acting_nets(self):
        raise NotImplementedError

    def rollout(self, env, episode, rng, explore=True):
        observations, masks = env.reset(episode)
        hidden = self.init_hidden(1)
        prev_actions = None
        done = False
        while not done:
            epsilon = self.hyper.epsilon(self.env_steps) if explore else 0.0
            actions, hidden = self.select_actions(observations, masks, hidden, prev_actions, epsilon, rng)
            observations, masks, _, done, _ = env.step(actions)
            prev_actions = actions
            if explore:
                self.env_steps += 1
        return env.record

    # --- learning ---
    def batch(self, records):
        return episode_batch(records, self.n_actions, self.dtype)

    def train_step(self, records):
        """One Adam step on the TD loss of the sampled episodes; returns the loss"""
        batch = self.batch(records)
        loss = self.loss(batch)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"Non-finite loss {loss.item()} after {self.updates} updates "
                f"(lr={self.hyper.learning_rate}, episodes seen={self.episodes_seen})"
            )
        self.optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(self.parameters(), self.hyper.grad_clip)
        self.optimizer.step()
        self.updates += 1
        if self.updates % self.hyper.target_sync_every == 0:
            self.target_sync()
        return float(loss.item())

    # --- checkpoint state ---
    def state_dict(self):
        return {
            "algorithm": self.algorithm,
            "modules": {name: module.state_dict() for name, module in self.modules().items()},
            "optimizer": self.optimizer.state_dict(),
            "env_steps": self.env_steps,
            "updates": self.updates,
            "episodes_seen": self.episodes_seen,
        }

    def load_state_dict(self, state):
        if state.get("algorithm") != self.algorithm:
            raise ValueError(f"Checkpoint holds {state.get('algorithm')}, expected {self.algorithm}")
        for name, module in self.modules().items():
            module.load_state_dict(state["modules"][name])
        self.optimizer.load_state_dict(state["optimizer"])
        self.env_steps = state["env_steps"]
        self.updates = state["updates"]
        self.episodes_seen = state["episodes_seen"]


class QmixLearner(RecurrentLearner):
    """Parameter-shared agent network plus monotonic mixer"""

    algorithm = "qmix"

    def _build(self):
        h = self.hyper
        self.agent = AgentNet(self.input_dim, self.n_actions, h.rnn_hidden).to(self.dtype)
        self.mixer = MixerNet(self.n_agents, self.state_dim, h.mixer_hidden, h.hyper_hidden).to(self.dtype)
        self.target_agent = AgentNet(self.input_dim, self.n_actions, h.rnn_hidden).to(self.dtype)
        self.target_mixer = MixerNet(self.n_agents, self.state_dim, h.mixer_hidden, h.hyper_hidden).to(self.dtype)
        self.target_sync()

    def parameters(self):
        return list(self.agent.parameters()) + list(self.mixer.parameters())

    def modules(self):
        return {"agent": self.agent, "mixer": self.mixer,
                "target_agent": self.target_agent, "target_mixer": self.target_mixer}

    def acting_nets(self):
        return self.agent

    def target_sync(self):
        self.target_agent.load_state_dict(self.agent.state_dict())
        self.target_mixer.load_state_dict(self.mixer.state_dict())

    def td_targets(self, batch):
        """y = scaled cost + Q_tot^-(per-agent masked minima at t+1, s(t+1)); y = scaled cost at terminal slots"""
        with torch.no_grad():
            costs = batch["cost"] * self.cost_scale
            target_q = self.unroll(self.target_agent, batch)
            next_min = masked_min(target_q[:, 1:], self.target_masks(batch)[:, 1:])
            next_tot = self.target_mixer(next_min, batch["state"][:, 1:])
            targets = costs.clone()
            targets[:, :-1] += (1.0 - batch["terminal"][:, :-1]) * next_tot
        return targets

    def q_total(self, batch):
        q = self.unroll(self.agent, batch)
        chosen = torch.gather(q, dim=-1, index=batch["action"].unsqueeze(-1)).squeeze(-1)
        return self.mixer(chosen, batch["state"])

    def loss(self, batch):
        td = (self.q_total(batch) - self.td_targets(batch)) * batch["filled"]
        return (td ** 2).sum() / batch["filled"].sum()


# ===========================
# Training loop
# ===========================

def train(cfg, hyper, seed, learner=None, storage=None, progress=None, label=None):
    """
    Masked epsilon-greedy training over hyper.episodes episodes.
    Returns (learner, curve) with curve columns episode, cumulative_cost, epsilon, loss.
    """
    learner = learner or QmixLearner(cfg, hyper, seed)
    hyper = learner.hyper
    label = label or learner.algorithm
    progress = VERBOSE if progress is None else progress
    env = UavAoiEnv(cfg, seed, strict=hyper.use_action_mask)
    memory = ReplayMemory(hyper.replay_capacity, make_rng(seed, ROLE_REPLAY))
    policy_rng = make_rng(seed, ROLE_POLICY)
    warmup = max(hyper.warmup_episodes, 1)

    if progress:
        print(f"\n{'=' * 70}")
        print(f"🧠 TRAINING {label.upper()} | seed={seed} | episodes={hyper.episodes}")
        print(f"{'=' * 70}")

    rows = []
    started = time.time()
    for episode in tqdm(range(hyper.episodes), desc=label, disable=not progress):
        epsilon = hyper.epsilon(learner.env_steps)
        record = learner.rollout(env, episode, policy_rng, explore=True)
        memory.push(record.compact())
        learner.episodes_seen += 1

        loss = np.nan
        if len(memory) >= warmup:
            loss = learner.train_step(memory.sample(hyper.batch_size))
        learner.rng_state = {"policy": policy_rng.bit_generator.state, "replay": memory.rng.bit_generator.state}
        rows.append({
            "episode": episode,
            "cumulative_cost": record.cumulative_cost,
            "epsilon": epsilon,
            "loss": loss,
        })
        if storage is not None and hyper.checkpoint_every > 0 and (episode + 1) % hyper.checkpoint_every == 0:
            storage.save_checkpoint(learner, tag=f"ep{episode + 1:06d}")

    if progress:
        print(f"✅ {label} trained in {time.time() - started:.1f}s "
              f"({learner.updates} updates, {learner.env_steps} env steps)")
    return learner, pd.DataFrame(rows, columns=["episode", "cumulative_cost", "epsilon", "loss"])


def execute(learner, env, episode=0):
    """Greedy decentralized rollout: masked argmin per agent, no mixer, no global state"""
    return learner.rollout(env, episode, rng=None, explore=False)
