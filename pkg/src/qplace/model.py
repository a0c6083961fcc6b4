"""Domain types shared by the simulator, workload generator and environment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Optional


class UsageError(RuntimeError):
    """Raised when an operation is called in a state that violates its contract."""


class TaskStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed_permanent"

    @property
    def terminal(self) -> bool:
        return self in (TaskStatus.COMPLETED, TaskStatus.FAILED)


def _is_power_of_two(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


@dataclass(frozen=True)
class QNodeSpec:
    """Static capabilities of one quantum backend (one QPU)."""

    id: int
    name: str
    qubits: int
    quantum_volume: int
    d1cps: float  # depth-1 circuit layers per second
    gates: frozenset = frozenset()
    topology: str = ""

    def __post_init__(self):
        if self.qubits < 1:
            raise ValueError(f"node {self.name!r}: qubits must be >= 1, got {self.qubits}")
        if not self.d1cps > 0 or not math.isfinite(self.d1cps):
            raise ValueError(f"node {self.name!r}: d1cps must be > 0, got {self.d1cps}")
        if self.quantum_volume < 2 or not _is_power_of_two(self.quantum_volume):
            raise ValueError(
                f"node {self.name!r}: quantum volume must be a power of two >= 2, got {self.quantum_volume}"
            )


@dataclass(frozen=True)
class PlacementOutcome:
    accepted: bool
    node_id: int
    start_time: Optional[float] = None
    exec_time: Optional[float] = None
    completion_time: Optional[float] = None
    total_time: Optional[float] = None
    rejection_reason: Optional[str] = None

    @property
    def wait_time(self) -> Optional[float]:
        if not self.accepted:
            return None
        return self.total_time - self.exec_time


INSUFFICIENT_QUBITS = "InsufficientQubits"


@dataclass
class QTask:
    """One gate-based circuit job plus its lifecycle bookkeeping."""

    id: int
    qubits: int
    base_depth: int
    shots: int
    arrival: float
    gates: frozenset = frozenset()
    topology: str = ""
    app: str = ""
    status: TaskStatus = TaskStatus.PENDING
    kappa: int = 0  # replacement (rescheduling) count
    placement: Optional[PlacementOutcome] = field(default=None, repr=False)

    def __post_init__(self):
        if self.qubits < 1 or self.base_depth < 1 or self.shots < 1:
            raise ValueError(f"task {self.id}: qubits, base_depth and shots must be >= 1")
        if self.arrival < 0:
            raise ValueError(f"task {self.id}: arrival must be nonnegative")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "app": self.app,
            "qubits": self.qubits,
            "base_depth": self.base_depth,
            "gates": sorted(self.gates),
            "shots": self.shots,
            "topology": self.topology,
            "arrival": self.arrival,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QTask":
        return cls(
            id=int(rec["id"]),
            qubits=int(rec["qubits"]),
            base_depth=int(rec["base_depth"]),
            shots=int(rec["shots"]),
            arrival=float(rec["arrival"]),
            gates=frozenset(rec.get("gates", ())),
            topology=rec.get("topology", ""),
            app=rec.get("app", ""),
        )

    def fresh_copy(self) -> "QTask":
        return QTask.from_record(self.to_record())


def estimate_execution_time(task: QTask, node: QNodeSpec, effective_depth: int) -> float:
    """Execution time in seconds: depth-1 layers times shots over the node's D1CPS."""
    return effective_depth * task.shots / node.d1cps


def inflate_depth(base_depth: int, overhead: float) -> int:
    """ceil(base_depth * overhead), evaluated on the decimal value of ``overhead``.

    Plain float multiplication would turn 100 * 1.37 into 137.00000000000003.
    """
    return int(math.ceil(Decimal(base_depth) * Decimal(repr(float(overhead)))))
