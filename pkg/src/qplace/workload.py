"""Backend registry, circuit records and random episode workloads."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .model import QNodeSpec, QTask, UsageError, inflate_depth

DEFAULT_SHOTS = 1024


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class CircuitRecord:
    app: str
    qubits: int
    base_depth: int
    gates: frozenset = frozenset()
    shots: int = DEFAULT_SHOTS


@dataclass(frozen=True)
class BackendRegistry:
    nodes: tuple
    overhead: tuple

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("registry needs at least one node")
        if len(self.overhead) != len(self.nodes):
            raise ValueError("one overhead factor per node required")
        for node, o in zip(self.nodes, self.overhead):
            if not o >= 1.0:
                raise ValueError(f"node {node.name!r}: overhead must be >= 1.0, got {o}")
        if [n.id for n in self.nodes] != list(range(len(self.nodes))):
            raise ValueError("node ids must be dense 0..m-1 in order")

    def __len__(self):
        return len(self.nodes)

    @property
    def max_d1cps(self) -> float:
        return max(n.d1cps for n in self.nodes)


@dataclass
class EpisodeWorkload:
    tasks: list
    window: float
    seed: int | None = None


def _split_gates(text: str) -> frozenset:
    return frozenset(g.strip() for g in (text or "").split(";") if g.strip())


def _data_path(name: str):
    return resources.files("qplace").joinpath("data").joinpath(name)


def default_backends_path():
    return _data_path("backends.csv")


def default_circuits_path():
    return _data_path("circuits.csv")


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.lstrip().startswith("#"))
        return list(reader)


def load_backend_registry(path=None) -> BackendRegistry:
    path = default_backends_path() if path is None else path
    nodes, overhead, seen = [], [], set()
    for lineno, row in enumerate(_read_rows(path), start=2):
        name = (row.get("name") or "").strip()
        where = f"{path}: row {lineno} ({name or '?'})"
        if not name:
            raise ParseError(f"{where}: missing name")
        if name in seen:
            raise ParseError(f"{where}: duplicate backend name")
        seen.add(name)
        try:
            o = float(row.get("overhead") or 1.0)
            node = QNodeSpec(
                id=len(nodes),
                name=name,
                qubits=int(row["qubits"]),
                quantum_volume=int(row["qv"]),
                d1cps=float(row["d1cps"]),
                gates=_split_gates(row.get("gates", "")),
                topology=(row.get("topology") or "").strip(),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc}") from None
        if not o >= 1.0:
            raise ParseError(f"{where}: overhead must be >= 1.0, got {o}")
        nodes.append(node)
        overhead.append(o)
    if not nodes:
        raise ParseError(f"{path}: no backends")
    return BackendRegistry(tuple(nodes), tuple(overhead))


def load_circuit_records(path=None) -> list[CircuitRecord]:
    path = default_circuits_path() if path is None else path
    records = []
    for lineno, row in enumerate(_read_rows(path), start=2):
        try:
            rec = CircuitRecord(
                app=row["app"].strip(),
                qubits=int(row["qubits"]),
                base_depth=int(row["base_depth"]),
                gates=_split_gates(row.get("gates", "")),
                shots=int(row.get("shots") or DEFAULT_SHOTS),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: row {lineno}: {exc}") from None
        if rec.qubits < 1 or rec.base_depth < 1 or rec.shots < 1:
            raise ParseError(f"{path}: row {lineno}: qubits, base_depth and shots must be >= 1")
        records.append(rec)
    if not records:
        raise ParseError(f"{path}: no circuit records")
    return records


def generate_episode_workload(records: Sequence[CircuitRecord], seed: int, n: int = 60,
                              window: float = 60.0) -> EpisodeWorkload:
    """Draw ``n`` tasks uniformly (with replacement) from ``records``.

    Arrivals are a Poisson process conditioned on exactly ``n`` events in
    ``[0, window)``, i.e. sorted independent uniforms.
    """
    if not records:
        raise UsageError("no circuit records to draw from")
    if n < 1 or not window > 0:
        raise UsageError("need n >= 1 and window > 0")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(records), size=n)
    arrivals = np.sort(rng.uniform(0.0, window, size=n))
    tasks = []
    for i, (k, a) in enumerate(zip(picks, arrivals)):
        rec = records[int(k)]
        tasks.append(QTask(
            id=i,
            qubits=rec.qubits,
            base_depth=rec.base_depth,
            shots=rec.shots,
            arrival=float(a),
            gates=rec.gates,
            app=rec.app,
        ))
    return EpisodeWorkload(tasks, float(window), seed)


def effective_depth(item, node: QNodeSpec, registry: BackendRegistry) -> int:
    """Depth of a circuit record or task after mapping onto ``node``."""
    if not 0 <= node.id < len(registry) or registry.nodes[node.id] != node:
        raise UsageError(f"node {node.name!r} is not in the registry")
    return inflate_depth(item.base_depth, registry.overhead[node.id])


# -- dump / load ------------------------------------------------------------

def dump_workloads(workloads: Sequence[EpisodeWorkload], path):
    """JSON-lines, one task per line, tagged with its episode and seed."""
    with open(path, "w") as fh:
        for ep, wl in enumerate(workloads):
            for task in wl.tasks:
                rec = {"episode": ep, "seed": wl.seed, "window": wl.window}
                rec.update(task.to_record())
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_workloads(path) -> list[EpisodeWorkload]:
    episodes: dict[int, EpisodeWorkload] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ep = int(rec["episode"])
            wl = episodes.get(ep)
            if wl is None:
                wl = episodes[ep] = EpisodeWorkload([], float(rec["window"]), rec.get("seed"))
            wl.tasks.append(QTask.from_record(rec))
    return [episodes[k] for k in sorted(episodes)]


def max_dataset_depth(records: Sequence[CircuitRecord]) -> int:
    return max(r.base_depth for r in records)

