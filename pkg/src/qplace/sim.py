"""Deterministic discrete-event engine for a single quantum data center.

Each node runs its queue strictly FIFO with no preemption.  Completion times
are fixed analytically when a task is placed, so the event queue only exists
to give an auditable, time-ordered log of what happened.
"""
from __future__ import annotations

import heapq
import json
import operator
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .model import (
    INSUFFICIENT_QUBITS,
    PlacementOutcome,
    QNodeSpec,
    QTask,
    TaskStatus,
    UsageError,
    estimate_execution_time,
    inflate_depth,
)


@dataclass(frozen=True)
class Event:
    t: float
    seq: int
    kind: str
    task_id: int
    node_id: int | None = None
    detail: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"t": self.t, "kind": self.kind, "task_id": self.task_id,
                "node_id": self.node_id, "detail": self.detail}


@dataclass
class NodeState:
    spec: QNodeSpec
    free_at: float = 0.0
    queue: deque = field(default_factory=deque)


class DataCenter:
    """Node queues, placement, constraint checks and the event log.

    ``registry`` needs ``nodes`` (list of QNodeSpec with dense ids) and
    ``overhead`` (per-node depth multiplier); see :mod:`qplace.workload`.
    """

    def __init__(self, registry, tasks: Iterable[QTask] = ()):
        self.registry = registry
        self.nodes = [NodeState(spec) for spec in registry.nodes]
        self.tasks: dict[int, QTask] = {}
        self.clock = 0.0
        self.log: list[Event] = []
        self._heap: list[tuple] = []
        self._seq = 0
        for task in tasks:
            self.add_task(task)

    # -- events -----------------------------------------------------------
    def _schedule(self, t, kind, task_id, node_id=None, detail=None):
        heapq.heappush(self._heap, (t, self._seq, kind, task_id, node_id, detail or {}))
        self._seq += 1

    def _record(self, t, kind, task_id, node_id=None, detail=None):
        self.log.append(Event(t, self._seq, kind, task_id, node_id, detail or {}))
        self._seq += 1

    def add_task(self, task: QTask):
        if task.id in self.tasks:
            raise UsageError(f"duplicate task id {task.id}")
        self.tasks[task.id] = task
        self._schedule(task.arrival, "arrive", task.id)

    def advance(self, t: float):
        """Process every pending event with time <= t, then set the clock to t."""
        if t < self.clock:
            raise UsageError(f"cannot move clock backwards ({t} < {self.clock})")
        while self._heap and self._heap[0][0] <= t:
            et, seq, kind, task_id, node_id, detail = heapq.heappop(self._heap)
            if kind == "complete":
                node = self.nodes[node_id]
                head = node.queue.popleft()
                assert head == task_id, "FIFO violated"
                self.tasks[task_id].status = TaskStatus.COMPLETED
            self.log.append(Event(et, seq, kind, task_id, node_id, detail))
        self.clock = t

    def drain(self):
        """Run the clock forward until every placed task has completed."""
        horizon = max((e[0] for e in self._heap), default=self.clock)
        self.advance(max(horizon, self.clock))

    # -- placement ----------------------------------------------------------
    def _task(self, task_id) -> QTask:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UsageError(f"unknown task id {task_id}") from None

    def _node(self, node_id) -> NodeState:
        try:
            idx = operator.index(node_id)
        except TypeError:
            raise UsageError(f"node id must be an integer, got {node_id!r}") from None
        if not 0 <= idx < len(self.nodes):
            raise UsageError(f"unknown node id {node_id}")
        return self.nodes[idx]

    def effective_depth(self, task: QTask, node_id: int) -> int:
        return inflate_depth(task.base_depth, self.registry.overhead[node_id])

    def exec_time(self, task: QTask, node_id: int) -> float:
        spec = self.nodes[node_id].spec
        return estimate_execution_time(task, spec, self.effective_depth(task, node_id))

    def try_place(self, task_id: int, node_id: int, now: float | None = None) -> PlacementOutcome:
        task = self._task(task_id)
        node = self._node(node_id)
        node_id = int(node_id)
        if task.status is not TaskStatus.PENDING:
            raise UsageError(f"task {task_id} is {task.status.value}, not pending")
        now = self.clock if now is None else now
        if now < task.arrival:
            raise UsageError(f"task {task_id} placed at {now} before its arrival {task.arrival}")
        self.advance(now)

        if task.qubits > node.spec.qubits:
            self._record(now, "reject", task_id, node_id,
                         {"reason": INSUFFICIENT_QUBITS, "kappa": task.kappa})
            return PlacementOutcome(False, node_id, rejection_reason=INSUFFICIENT_QUBITS)

        exec_time = self.exec_time(task, node_id)
        start = max(now, node.free_at)
        completion = start + exec_time
        outcome = PlacementOutcome(
            accepted=True,
            node_id=node_id,
            start_time=start,
            exec_time=exec_time,
            completion_time=completion,
            total_time=completion - task.arrival,
        )
        node.free_at = completion
        node.queue.append(task_id)
        task.status = TaskStatus.RUNNING
        task.placement = outcome
        self._record(now, "place", task_id, node_id, {"kappa": task.kappa})
        self._schedule(start, "start", task_id, node_id)
        self._schedule(completion, "complete", task_id, node_id, {"exec": exec_time})
        return outcome

    def fail_task(self, task_id: int):
        task = self._task(task_id)
        if task.status is not TaskStatus.PENDING:
            raise UsageError(f"task {task_id} is {task.status.value}, not pending")
        task.status = TaskStatus.FAILED
        self._record(self.clock, "fail", task_id, None, {"kappa": task.kappa})

    # -- views ----------------------------------------------------------------
    def backlog(self, node_id: int) -> float:
        return max(0.0, self.nodes[node_id].free_at - self.clock)

    def queued_task_ids(self) -> list[int]:
        return [tid for node in self.nodes for tid in node.queue]

    def write_log(self, path):
        with open(path, "w") as fh:
            for event in self.log:
                fh.write(json.dumps(event.to_record(), sort_keys=True) + "\n")


def episode_total_completion(tasks: Sequence[QTask] | Iterable[QTask]) -> float:
    """Sum of total completion times over completed tasks.

    Failed tasks add nothing here; callers count them via ``count_failed``.
    """
    total = 0.0
    for task in tasks:
        if not task.status.terminal:
            raise UsageError(f"task {task.id} is still {task.status.value}")
        if task.status is TaskStatus.COMPLETED:
            total += task.placement.total_time
    return total


def count_failed(tasks: Iterable[QTask]) -> int:
    return sum(1 for t in tasks if t.status is TaskStatus.FAILED)
