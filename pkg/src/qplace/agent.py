"""Rainbow-style DQN learner: double-Q action selection, n-step returns,
categorical value distributions, prioritized replay and noisy exploration.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from .model import UsageError
from .nn import Adam, CategoricalQNet, TrainingError

CHECKPOINT_VERSION = 1


@dataclass
class AgentConfig:
    gamma: float = 0.99
    n_step: int = 3
    batch_size: int = 180
    n_atoms: int = 10
    v_min: float = -10.0
    v_max: float = 10.0
    lr: float = 0.01
    hidden: tuple = (128, 128)
    noisy: bool = True
    sigma0: float = 0.5
    target_sync_period: int = 500
    replay_capacity: int = 50_000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    priority_floor: float = 1e-6
    warmup: int = 1000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.n_step < 1 or self.batch_size < 1 or self.n_atoms < 2:
            raise ValueError("n_step and batch_size must be >= 1, n_atoms >= 2")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay capacity smaller than a batch")
        if self.target_sync_period < 1:
            raise ValueError("target_sync_period must be >= 1")


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s2: np.ndarray
    done: bool
    n_used: int = 1
    priority: float = 1.0


def aggregate_n_step(window, gamma: float) -> Transition:
    """Fold up to n raw transitions into one, stopping after the first done."""
    ret, k = 0.0, 0
    for k, tr in enumerate(window):
        ret += gamma ** k * tr.r
        if tr.done:
            break
    last = window[k]
    first = window[0]
    return Transition(first.s, first.a, ret, last.s2, bool(last.done), k + 1)


class NStepBuffer:
    def __init__(self, n: int, gamma: float):
        self.n, self.gamma = n, gamma
        self.queue: deque = deque()

    def push(self, tr: Transition, episode_end: bool = False) -> list[Transition]:
        self.queue.append(tr)
        out = []
        while self.queue and (len(self.queue) >= self.n or episode_end
                              or any(t.done for t in self.queue)):
            window = [self.queue[i] for i in range(min(self.n, len(self.queue)))]
            out.append(aggregate_n_step(window, self.gamma))
            self.queue.popleft()
        return out

    def clear(self):
        self.queue.clear()


class SumTree:
    """Array-backed binary tree of priorities with batched update and search."""

    def __init__(self, capacity: int):
        size = 1
        while size < capacity:
            size *= 2
        self.capacity = capacity
        self.size = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self, idx):
        return self.tree[np.asarray(idx) + self.size]

    def update(self, idx, values):
        pos = np.atleast_1d(np.asarray(idx, dtype=np.int64)) + self.size
        self.tree[pos] = values
        pos = np.unique(pos // 2)
        while pos[0] >= 1:
            self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1]
            if pos[0] == 1:
                break
            pos = np.unique(pos // 2)

    def find(self, values):
        """Leaf index whose prefix-sum interval contains each value."""
        v = np.array(values, dtype=np.float64)
        idx = np.ones(v.shape, dtype=np.int64)
        while idx[0] < self.size:
            left = self.tree[2 * idx]
            right = v >= left
            v = np.where(right, v - left, v)
            idx = 2 * idx + right
        return idx - self.size


class PrioritizedReplay:
    def __init__(self, capacity: int, obs_dim: int, alpha: float = 0.6, rng=None):
        self.capacity, self.alpha = capacity, alpha
        self.tree = SumTree(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.s2 = np.zeros((capacity, obs_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.n_used = np.zeros(capacity, dtype=np.int64)
        self.pos = 0
        self.count = 0
        self.max_priority = 1.0
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __len__(self):
        return self.count

    def add(self, tr: Transition, priority: float | None = None):
        i = self.pos
        self.s[i], self.s2[i] = tr.s, tr.s2
        self.a[i], self.r[i], self.done[i], self.n_used[i] = tr.a, tr.r, float(tr.done), tr.n_used
        p = self.max_priority if priority is None else priority
        self.tree.update(i, p ** self.alpha)
        self.pos = (self.pos + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def probabilities(self, idx=None):
        idx = np.arange(self.count) if idx is None else idx
        return self.tree.leaves(idx) / self.tree.total

    def sample_indices(self, k: int):
        if self.count < k:
            raise UsageError(f"replay holds {self.count} transitions, need {k}")
        u = self.rng.uniform(0.0, self.tree.total, size=k)
        return np.minimum(self.tree.find(u), self.count - 1)

    def sample(self, k: int, beta: float):
        idx = self.sample_indices(k)
        probs = self.probabilities(idx)
        w = (self.count * probs) ** (-beta)
        w /= w.max()
        batch = {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s2": self.s2[idx],
                 "done": self.done[idx], "n_used": self.n_used[idx]}
        return batch, w, idx

    def update_priorities(self, idx, priorities):
        priorities = np.asarray(priorities, dtype=np.float64)
        self.tree.update(idx, priorities ** self.alpha)
        self.max_priority = max(self.max_priority, float(priorities.max()))


def project_distribution(next_probs, rewards, discounts, dones, support):
    """Categorical projection of r + discount * z onto ``support``.

    ``next_probs`` is (batch, atoms); ``discounts`` holds gamma**n per row.
    """
    v_min, v_max = support[0], support[-1]
    n = len(support)
    dz = (v_max - v_min) / (n - 1)
    tz = rewards[:, None] + (discounts * (1.0 - dones))[:, None] * support[None, :]
    tz = np.clip(tz, v_min, v_max)
    b = (tz - v_min) / dz
    lo = np.floor(b).astype(np.int64)
    hi = np.ceil(b).astype(np.int64)
    lo = np.clip(lo, 0, n - 1)
    hi = np.clip(hi, 0, n - 1)
    w_lo = hi - b
    w_hi = b - lo
    same = lo == hi
    w_lo[same] = 1.0
    w_hi[same] = 0.0
    out = np.zeros_like(next_probs)
    rows = np.repeat(np.arange(len(rewards)), n)
    np.add.at(out, (rows, lo.ravel()), (next_probs * w_lo).ravel())
    np.add.at(out, (rows, hi.ravel()), (next_probs * w_hi).ravel())
    return out


class RainbowAgent:
    def __init__(self, obs_dim: int, n_actions: int, config: AgentConfig | None = None, seed: int = 0):
        self.config = cfg = config or AgentConfig()
        self.obs_dim, self.n_actions, self.seed = obs_dim, n_actions, seed
        seeds = np.random.SeedSequence(seed).spawn(3)
        self.noise_rng = np.random.default_rng(seeds[0])
        net_seed = int(np.random.default_rng(seeds[1]).integers(2**31))
        self.online = CategoricalQNet(obs_dim, n_actions, cfg.n_atoms, cfg.v_min, cfg.v_max,
                                      cfg.hidden, cfg.noisy, cfg.sigma0, seed=net_seed)
        self.target = self.online.clone()
        self.online.resample_noise(self.noise_rng)
        self.support = self.online.support
        self.optimizer = Adam(lr=cfg.lr)
        self.replay = PrioritizedReplay(cfg.replay_capacity, obs_dim, cfg.per_alpha,
                                        rng=np.random.default_rng(seeds[2]))
        self.n_step = NStepBuffer(cfg.n_step, cfg.gamma)
        self.progress = 0.0
        self.learn_steps = 0
        self.sync_count = 0
        self.synced = False

    # -- acting --------------------------------------------------------------
    def act(self, state) -> int:
        q = self.online.q_values(state)[0]
        return int(np.argmax(q))

    @property
    def beta(self) -> float:
        c = self.config
        return c.per_beta_start + (c.per_beta_end - c.per_beta_start) * min(1.0, self.progress)

    # -- memory ----------------------------------------------------------------
    def observe(self, tr: Transition, episode_end: bool = False) -> list[Transition]:
        emitted = self.n_step.push(tr, episode_end)
        for agg in emitted:
            self.replay.add(agg)
        return emitted

    def ready(self) -> bool:
        return len(self.replay) >= max(self.config.warmup, self.config.batch_size)

    # -- learning --------------------------------------------------------------
    def sync_target(self):
        self.target.copy_from(self.online)
        self.target.zero_noise()
        self.synced = True
        self.sync_count += 1

    def target_distribution(self, batch):
        """Double-DQN: online net picks a*, target net supplies its distribution."""
        s2 = batch["s2"]
        a_star = np.argmax(self.online.q_values(s2), axis=1)
        p_next = self.target.forward(s2)[np.arange(len(a_star)), a_star]
        discounts = self.config.gamma ** batch["n_used"].astype(np.float64)
        return project_distribution(p_next, batch["r"], discounts, batch["done"], self.support)

    def learn(self) -> float:
        if not self.synced:
            raise UsageError("target network has never been synced")
        cfg = self.config
        batch, weights, idx = self.replay.sample(cfg.batch_size, self.beta)
        target = self.target_distribution(batch)
        probs = self.online.forward(batch["s"])
        rows = np.arange(len(idx))
        p_sa = probs[rows, batch["a"]]
        per_sample = -(target * np.log(np.clip(p_sa, 1e-300, None))).sum(axis=1)
        loss = float(np.mean(weights * per_sample))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at learn step {self.learn_steps}")
        grad = np.zeros_like(probs)
        grad[rows, batch["a"]] = (weights / len(idx))[:, None] * (p_sa - target)
        self.online.backward(grad)
        self.optimizer.step(self.online.named_params(), self.online.named_grads())
        self.replay.update_priorities(idx, per_sample + cfg.priority_floor)
        self.online.resample_noise(self.noise_rng)
        self.learn_steps += 1
        if self.learn_steps % cfg.target_sync_period == 0:
            self.sync_target()
        return loss

    # -- checkpoints ------------------------------------------------------------
    def frozen_policy(self) -> "FrozenPolicy":
        net = self.online.clone()
        net.zero_noise()
        return FrozenPolicy(net)

    def save(self, path, extra: dict | None = None):
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        doc = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "agent_config": cfg,
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "seed": self.seed,
            "network": self.online.state_dict(),
        }
        doc.update(extra or {})
        with open(path, "w") as fh:
            json.dump(doc, fh)


class FrozenPolicy:
    """Noise-free snapshot used for evaluation."""

    name = "drlq"

    def __init__(self, net: CategoricalQNet, meta: dict | None = None):
        self.net = net
        self.meta = meta or {}

    def act(self, state) -> int:
        return int(np.argmax(self.net.q_values(state)[0]))

    def begin_episode(self, seed=None):
        pass

    def select(self, env) -> int:
        return self.act(env.state)

    @classmethod
    def load(cls, path) -> "FrozenPolicy":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('checkpoint_version')!r}")
        net = CategoricalQNet.from_state_dict(doc["network"])
        net.zero_noise()
        meta = {k: v for k, v in doc.items() if k != "network"}
        return cls(net, meta)
