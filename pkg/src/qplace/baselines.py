"""Heuristic placement policies used as comparison points.

Every policy exposes ``begin_episode(seed)`` and ``select(env)``, the same
surface the learned agent is wrapped in, so the harness can swap them freely.
"""
from __future__ import annotations

import numpy as np

from .model import QTask
from .sim import DataCenter


def greedy_select(dc: DataCenter, task: QTask) -> int:
    """Shortest current backlog on the first attempt, largest node on any retry.

    Ties go to the lowest node index in both cases.
    """
    if task.kappa > 0:
        return int(np.argmax([n.spec.qubits for n in dc.nodes]))
    return int(np.argmin([max(0.0, n.free_at - dc.clock) for n in dc.nodes]))


class GreedyPolicy:
    name = "greedy"

    def begin_episode(self, seed=None):
        pass

    def select(self, env) -> int:
        return greedy_select(env.dc, env.current_task)


class RoundRobinPolicy:
    name = "roundrobin"

    def __init__(self, n_nodes: int):
        if n_nodes < 1:
            raise ValueError("need at least one node")
        self.n_nodes = n_nodes
        self.cursor = 0

    def begin_episode(self, seed=None):
        # episodes stay independent of evaluation order
        self.cursor = 0

    def round_robin_select(self) -> int:
        node = self.cursor
        self.cursor = (self.cursor + 1) % self.n_nodes
        return node

    def select(self, env) -> int:
        return self.round_robin_select()


class RandomPolicy:
    name = "random"

    def __init__(self, n_nodes: int, seed: int = 0):
        self.n_nodes = n_nodes
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def begin_episode(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng([self.seed, seed])

    def random_select(self) -> int:
        return int(self.rng.integers(self.n_nodes))

    def select(self, env) -> int:
        return self.random_select()


BASELINES = ("greedy", "roundrobin", "random")


def make_baseline(name: str, n_nodes: int, seed: int = 0):
    if name == "greedy":
        return GreedyPolicy()
    if name == "roundrobin":
        return RoundRobinPolicy(n_nodes)
    if name == "random":
        return RandomPolicy(n_nodes, seed)
    raise ValueError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
