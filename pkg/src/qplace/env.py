"""Placement MDP over the data-center simulator.

One step places the current task on one node.  A rejected placement keeps
the same task in front of the agent, so episodes run longer than the number
of tasks whenever rescheduling happens.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .model import QTask, TaskStatus, UsageError
from .sim import DataCenter, count_failed, episode_total_completion
from .workload import (
    BackendRegistry,
    CircuitRecord,
    EpisodeWorkload,
    generate_episode_workload,
    max_dataset_depth,
)

NODE_FEATURES = 4
TASK_FEATURES = 3
QUBIT_SCALE = 128.0
LOG2_QV_SCALE = 8.0
SHOT_SCALE = 8192.0


@dataclass
class EnvConfig:
    delta: float = -10.0  # failure penalty
    alpha: float = 0.1  # penalty factor on the replacement count
    gamma: float = 0.99
    n_tasks: int = 60
    window: float = 60.0
    max_reschedules: int = 10

    def __post_init__(self):
        if not self.delta < 0:
            raise ValueError("delta must be negative")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.n_tasks < 1 or not self.window > 0 or self.max_reschedules < 1:
            raise ValueError("n_tasks, window and max_reschedules must be positive")


def placement_reward(success: bool, kappa: int, alpha: float, delta: float,
                     total_time: Optional[float] = None) -> float:
    if success:
        return (1.0 / total_time) * (1.0 - alpha * kappa)
    return delta * (1.0 + alpha * kappa)


@dataclass(frozen=True)
class Normalizer:
    max_d1cps: float
    max_depth: float
    window: float
    qubit_scale: float = QUBIT_SCALE
    shot_scale: float = SHOT_SCALE

    def to_dict(self):
        return asdict(self)


def encode_state(dc: DataCenter, task: Optional[QTask], norm: Normalizer) -> np.ndarray:
    """Node features for every node followed by the current task's features.

    ``task=None`` (episode over) leaves the task slots at zero.
    """
    m = len(dc.nodes)
    out = np.zeros(m * NODE_FEATURES + TASK_FEATURES)
    for i, node in enumerate(dc.nodes):
        spec = node.spec
        out[i * NODE_FEATURES:(i + 1) * NODE_FEATURES] = (
            spec.qubits / norm.qubit_scale,
            math.log2(spec.quantum_volume) / LOG2_QV_SCALE,
            spec.d1cps / norm.max_d1cps,
            max(0.0, node.free_at - dc.clock) / norm.window,
        )
    if task is not None:
        if task.status is not TaskStatus.PENDING:
            raise UsageError(f"task {task.id} is not pending")
        out[m * NODE_FEATURES:] = (
            task.qubits / norm.qubit_scale,
            task.base_depth / norm.max_depth,
            task.shots / norm.shot_scale,
        )
    return out


def state_hash(state: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(state, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    task_done: bool
    episode_done: bool
    info: dict = field(default_factory=dict)


@dataclass
class EpisodeStats:
    steps: int = 0
    reward: float = 0.0
    reschedules: int = 0


class PlacementEnv:
    """Reset/step interface shared by the learning agent and the baselines."""

    def __init__(self, registry: BackendRegistry, records: Sequence[CircuitRecord],
                 config: EnvConfig | None = None):
        self.registry = registry
        self.records = list(records)
        self.config = config or EnvConfig()
        self.norm = Normalizer(
            max_d1cps=registry.max_d1cps,
            max_depth=float(max_dataset_depth(self.records)),
            window=self.config.window,
        )
        self.n_actions = len(registry)
        self.obs_dim = self.n_actions * NODE_FEATURES + TASK_FEATURES
        self.dc: DataCenter | None = None
        self.tasks: list[QTask] = []
        self.workload: EpisodeWorkload | None = None
        self._cursor = 0
        self.done = True
        self.state: np.ndarray | None = None
        self.stats = EpisodeStats()
        self.trace: list[dict] = []

    @property
    def current_task(self) -> Optional[QTask]:
        if self.done:
            return None
        return self.tasks[self._cursor]

    def reset(self, seed: int | None = None, workload: EpisodeWorkload | None = None) -> np.ndarray:
        if workload is None:
            workload = generate_episode_workload(self.records, seed, self.config.n_tasks,
                                                 self.config.window)
        self.workload = workload
        self.tasks = [t.fresh_copy() for t in workload.tasks]
        self.dc = DataCenter(self.registry, self.tasks)
        self._cursor = 0
        self.done = False
        self.stats = EpisodeStats()
        self.trace = []
        self.dc.advance(self.tasks[0].arrival)
        self.state = encode_state(self.dc, self.tasks[0], self.norm)
        return self.state

    def _next_decision(self):
        self._cursor += 1
        if self._cursor < len(self.tasks):
            self.dc.advance(max(self.dc.clock, self.tasks[self._cursor].arrival))
        else:
            self.done = True
            self.dc.drain()

    def step(self, action) -> StepResult:
        if self.done:
            raise UsageError("episode is over; call reset()")
        if not 0 <= int(action) < self.n_actions or int(action) != action:
            raise UsageError(f"action {action!r} outside [0, {self.n_actions})")
        action = int(action)
        cfg = self.config
        task = self.tasks[self._cursor]
        prev_hash = state_hash(self.state)
        outcome = self.dc.try_place(task.id, action, now=self.dc.clock)
        info = {"task_id": task.id, "placed_node": None}
        if outcome.accepted:
            reward = placement_reward(True, task.kappa, cfg.alpha, cfg.delta, outcome.total_time)
            task_done = True
            info.update(placed_node=action, total_time=outcome.total_time)
        else:
            task.kappa += 1
            self.stats.reschedules += 1
            reward = placement_reward(False, task.kappa, cfg.alpha, cfg.delta)
            task_done = False
            if task.kappa > cfg.max_reschedules:
                self.dc.fail_task(task.id)
                task_done = True
                info["failed"] = True
        info["kappa"] = task.kappa
        if task_done:
            self._next_decision()
        self.state = encode_state(self.dc, self.current_task, self.norm)
        self.stats.steps += 1
        self.stats.reward += reward
        self.trace.append({
            "state_hash": prev_hash, "action": action, "reward": reward,
            "kappa": task.kappa, "task_id": task.id, "node_id": info["placed_node"],
        })
        return StepResult(self.state, reward, task_done, self.done, info)

    # -- episode summaries ---------------------------------------------------
    def total_completion(self) -> float:
        return episode_total_completion(self.tasks)

    def failed_count(self) -> int:
        return count_failed(self.tasks)

    def reschedule_count(self) -> int:
        return sum(t.kappa for t in self.tasks)

    def write_trace(self, path):
        with open(path, "w") as fh:
            for row in self.trace:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
