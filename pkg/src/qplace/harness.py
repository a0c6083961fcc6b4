"""Training, evaluation, comparison and grid-search orchestration."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import AgentConfig, FrozenPolicy, RainbowAgent, Transition
from .baselines import BASELINES, make_baseline
from .env import EnvConfig, PlacementEnv
from .model import TaskStatus, UsageError
from .nn import TrainingError
from .workload import (
    EpisodeWorkload,
    dump_workloads,
    generate_episode_workload,
    load_backend_registry,
    load_circuit_records,
    load_workloads,
)

log = logging.getLogger(__name__)

# -- configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    train_iterations: int = 100
    steps_per_iteration: int = 1000
    eval_episodes: int = 100
    train_seed: int = 0
    eval_seed: int = 1_000_000
    agent_seed: int = 0
    policy_seed: int = 0
    tune_iterations: int = 10
    workers: int = 1

    def __post_init__(self):
        for name in ("train_iterations", "steps_per_iteration", "eval_episodes",
                     "tune_iterations", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def total_steps(self):
        return self.train_iterations * self.steps_per_iteration


@dataclass
class ExperimentConfig:
    backends: str = ""  # empty means the bundled registry
    circuits: str = ""
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``section.key`` overrides, e.g. ``{"agent.lr": 0.001}``."""
        sections = {"env": asdict_plain(self.env), "agent": asdict_plain(self.agent),
                    "run": asdict_plain(self.run)}
        paths = {"backends": self.backends, "circuits": self.circuits}
        for key, value in overrides.items():
            section, _, name = key.rpartition(".")
            if section in ("", "paths"):
                if name not in paths:
                    raise KeyError(f"unknown setting {key!r}")
                paths[name] = value
                continue
            if section not in sections or name not in sections[section]:
                raise KeyError(f"unknown setting {key!r}")
            sections[section][name] = value
        return ExperimentConfig(paths["backends"], paths["circuits"],
                                EnvConfig(**sections["env"]), AgentConfig(**sections["agent"]),
                                RunConfig(**sections["run"]))


def asdict_plain(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.replace(",", " ").split())
    return text


def config_to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["paths"] = {"backends": cfg.backends, "circuits": cfg.circuits}
    for name in ("env", "agent", "run"):
        parser[name] = {k: _format_value(v) for k, v in asdict_plain(getattr(cfg, name)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    default = ExperimentConfig()
    unknown = set(parser.sections()) - {"paths", "env", "agent", "run"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    overrides = {}
    if parser.has_section("paths"):
        for key, value in parser["paths"].items():
            if value and base_dir is not None and not Path(value).is_absolute():
                value = str(base_dir / value)
            overrides[f"paths.{key}"] = value
    for section in ("env", "agent", "run"):
        if not parser.has_section(section):
            continue
        defaults = asdict_plain(getattr(default, section))
        for key, value in parser[section].items():
            if key not in defaults:
                raise ValueError(f"unknown setting [{section}] {key}")
            overrides[f"{section}.{key}"] = _parse_value(value, defaults[key])
    cfg = default.replace(**overrides)
    for p in (cfg.backends, cfg.circuits):
        if p and not Path(p).exists():
            raise FileNotFoundError(p)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def make_env(cfg: ExperimentConfig) -> PlacementEnv:
    registry = load_backend_registry(cfg.backends or None)
    records = load_circuit_records(cfg.circuits or None)
    return PlacementEnv(registry, records, cfg.env)


# -- seeds -----------------------------------------------------------------------

def max_training_episodes(cfg: ExperimentConfig) -> int:
    # every episode takes at least n_tasks steps
    return cfg.run.total_steps // cfg.env.n_tasks + 1


def training_seed_range(cfg: ExperimentConfig) -> tuple[int, int]:
    return cfg.run.train_seed, cfg.run.train_seed + max_training_episodes(cfg)


def eval_seeds(cfg: ExperimentConfig, episodes: int | None = None, seed: int | None = None) -> list[int]:
    start = cfg.run.eval_seed if seed is None else seed
    return list(range(start, start + (episodes or cfg.run.eval_episodes)))


def check_seed_overlap(seeds: Sequence[int], train_range, allow_overlap=False):
    lo, hi = train_range
    clash = [s for s in seeds if lo <= s < hi]
    if clash:
        msg = (f"{len(clash)} evaluation seeds fall inside the training range [{lo}, {hi}), "
               f"e.g. {clash[0]}")
        if not allow_overlap:
            raise UsageError(msg + "; pass --allow-overlap to proceed anyway")
        log.warning(msg)
    elif seeds:
        log.info("evaluation seeds %d..%d are disjoint from training seeds [%d, %d)",
                 min(seeds), max(seeds), lo, hi)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    agent: RainbowAgent
    log_rows: list
    episodes: int
    checkpoint: Path | None = None


def _mean_or_none(xs):
    return float(np.mean(xs)) if xs else None


def train(cfg: ExperimentConfig, out_dir=None, progress=None) -> TrainResult:
    """Interleave environment steps and learn calls for the configured budget."""
    env = make_env(cfg)
    agent = RainbowAgent(env.obs_dim, env.n_actions, cfg.agent, seed=cfg.run.agent_seed)
    run = cfg.run
    total = run.total_steps
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(out_dir / "train_log.jsonl", "w") if out_dir is not None else None

    episode = 0
    state = env.reset(seed=run.train_seed + episode)
    ep_reward, ep_rewards, ep_lengths, losses, rows = 0.0, [], [], [], []
    step = 0
    try:
        for it in range(1, run.train_iterations + 1):
            for _ in range(run.steps_per_iteration):
                action = agent.act(state)
                res = env.step(action)
                agent.observe(Transition(state, action, res.reward, res.next_state, res.task_done),
                              episode_end=res.episode_done)
                step += 1
                agent.progress = step / total
                ep_reward += res.reward
                state = res.next_state
                if agent.ready():
                    if not agent.synced:
                        agent.sync_target()
                    losses.append(agent.learn())
                if res.episode_done:
                    ep_rewards.append(ep_reward)
                    ep_lengths.append(env.stats.steps)
                    ep_reward = 0.0
                    episode += 1
                    state = env.reset(seed=run.train_seed + episode)
            row = {
                "iter": it,
                "steps": step,
                "episodes": len(ep_rewards),
                "mean_episode_reward": _mean_or_none(ep_rewards),
                "mean_episode_length": _mean_or_none(ep_lengths),
                "loss": _mean_or_none(losses),
            }
            rows.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
            if progress:
                progress(row)
            ep_rewards, ep_lengths, losses = [], [], []
    except TrainingError:
        log.error("training aborted at step %d (iteration %d, episode %d)", step, it, episode)
        raise
    finally:
        if log_fh:
            log_fh.close()

    result = TrainResult(agent, rows, episode)
    if out_dir is not None:
        result.checkpoint = out_dir / "checkpoint.json"
        save_checkpoint(agent, cfg, env, result.checkpoint, episodes_used=episode + 1)
    return result


def save_checkpoint(agent: RainbowAgent, cfg: ExperimentConfig, env: PlacementEnv, path,
                    episodes_used: int):
    agent.save(path, extra={
        "env_config": asdict_plain(cfg.env),
        "normalization": env.norm.to_dict(),
        "registry": [n.name for n in env.registry.nodes],
        "train_seed_range": [cfg.run.train_seed, cfg.run.train_seed + episodes_used],
    })


def read_train_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- evaluation ----------------------------------------------------------------------

@dataclass
class EpisodeReport:
    episode: int
    seed: int | None
    total_completion_time: float
    reschedule_count: int
    failed_count: int
    steps: int
    reward: float
    tasks: list = field(default_factory=list, repr=False)


TASK_COLUMNS = ["episode", "task_id", "app", "qubits", "arrival", "status", "node_id",
                "start_time", "exec_time", "completion_time", "total_time", "kappa"]
EPISODE_COLUMNS = ["episode", "seed", "total_completion_time", "reschedule_count",
                   "failed_count", "steps", "reward"]


def make_policy(spec: str, n_nodes: int, seed: int = 0, checkpoint=None):
    """``spec`` is a baseline name, ``drlq`` (needs ``checkpoint``) or a checkpoint path."""
    if spec in BASELINES:
        return make_baseline(spec, n_nodes, seed)
    path = checkpoint if spec == "drlq" else spec
    if path is None:
        raise UsageError("policy 'drlq' needs a checkpoint file")
    policy = FrozenPolicy.load(path)
    if policy.net.n_actions != n_nodes:
        raise UsageError(f"checkpoint was trained for {policy.net.n_actions} nodes, registry has {n_nodes}")
    return policy


def run_episode(env: PlacementEnv, policy, workload: EpisodeWorkload, episode: int) -> EpisodeReport:
    policy.begin_episode(workload.seed if workload.seed is not None else episode)
    env.reset(workload=workload)
    reward = 0.0
    while not env.done:
        reward += env.step(policy.select(env)).reward
    rows = []
    for t in env.tasks:
        p = t.placement if t.status is TaskStatus.COMPLETED else None
        rows.append({
            "episode": episode, "task_id": t.id, "app": t.app, "qubits": t.qubits,
            "arrival": t.arrival, "status": t.status.value,
            "node_id": p.node_id if p else "", "start_time": p.start_time if p else "",
            "exec_time": p.exec_time if p else "", "completion_time": p.completion_time if p else "",
            "total_time": p.total_time if p else "", "kappa": t.kappa,
        })
    return EpisodeReport(episode, workload.seed, env.total_completion(), env.reschedule_count(),
                         env.failed_count(), env.stats.steps, reward, rows)


def _eval_chunk(args):
    cfg, spec, checkpoint, chunk = args
    env = make_env(cfg)
    policy = make_policy(spec, env.n_actions, cfg.run.policy_seed, checkpoint)
    return [run_episode(env, policy, wl, ep) for ep, wl in chunk]


def build_workloads(cfg: ExperimentConfig, seeds: Sequence[int]) -> list[EpisodeWorkload]:
    records = load_circuit_records(cfg.circuits or None)
    return [generate_episode_workload(records, s, cfg.env.n_tasks, cfg.env.window) for s in seeds]


def evaluate(cfg: ExperimentConfig, spec: str, workloads: Sequence[EpisodeWorkload],
             checkpoint=None, workers: int | None = None) -> list[EpisodeReport]:
    workers = workers or cfg.run.workers
    indexed = list(enumerate(workloads))
    if workers <= 1 or len(indexed) < 2:
        reports = _eval_chunk((cfg, spec, checkpoint, indexed))
    else:
        chunks = [indexed[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = [r for part in pool.map(_eval_chunk, [(cfg, spec, checkpoint, c) for c in chunks])
                       for r in part]
    return sorted(reports, key=lambda r: r.episode)


def summarize(reports: Sequence[EpisodeReport]) -> dict:
    totals = [r.total_completion_time for r in reports]
    res = [r.reschedule_count for r in reports]
    return {
        "episodes": len(reports),
        "mean_total_completion_time": statistics.fmean(totals),
        "std_total_completion_time": statistics.stdev(totals) if len(totals) > 1 else 0.0,
        "mean_reschedule_count": statistics.fmean(res),
        "std_reschedule_count": statistics.stdev(res) if len(res) > 1 else 0.0,
        "mean_failed_count": statistics.fmean(r.failed_count for r in reports),
        "mean_steps": statistics.fmean(r.steps for r in reports),
    }


def write_episode_csv(reports: Sequence[EpisodeReport], path):
    """One row per episode, then a ``summary`` row of means with stdev columns."""
    cols = EPISODE_COLUMNS + ["std_total_completion_time", "std_reschedule_count"]
    summary = summarize(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            w.writerow([r.episode, r.seed, repr(r.total_completion_time), r.reschedule_count,
                        r.failed_count, r.steps, repr(r.reward), "", ""])
        w.writerow(["summary", "", repr(summary["mean_total_completion_time"]),
                    repr(summary["mean_reschedule_count"]), repr(summary["mean_failed_count"]),
                    repr(summary["mean_steps"]),
                    repr(statistics.fmean(r.reward for r in reports)),
                    repr(summary["std_total_completion_time"]), repr(summary["std_reschedule_count"])])


def read_episode_csv(path) -> tuple[list[dict], dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    episodes = [r for r in rows if r["episode"] != "summary"]
    summary = next(r for r in rows if r["episode"] == "summary")
    return episodes, summary


def write_task_csv(reports: Sequence[EpisodeReport], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TASK_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerows(r.tasks)


# -- comparison -----------------------------------------------------------------------

def percent_reduction(baseline: float, candidate: float) -> float:
    return (baseline - candidate) / baseline * 100.0


def compare(cfg: ExperimentConfig, policies: Sequence[str], workloads: Sequence[EpisodeWorkload],
            checkpoint=None, out_dir=None) -> dict:
    if len(policies) < 2:
        raise UsageError("compare needs at least two policies")
    results = {p: evaluate(cfg, p, workloads, checkpoint) for p in policies}
    summary = {p: summarize(r) for p, r in results.items()}
    reductions = [
        {"candidate": a, "baseline": b,
         "reduction_pct": percent_reduction(summary[b]["mean_total_completion_time"],
                                            summary[a]["mean_total_completion_time"])}
        for a in policies for b in policies if a != b
    ]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for p, reports in results.items():
            write_episode_csv(reports, out_dir / f"{p}.csv")
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            cols = ["policy"] + list(next(iter(summary.values())).keys())
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for p, s in summary.items():
                w.writerow({"policy": p, **s})
        with open(out_dir / "reductions.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["candidate", "baseline", "reduction_pct"])
            w.writeheader()
            w.writerows(reductions)
    return {"reports": results, "summary": summary, "reductions": reductions}


def format_summary(summary: dict, reductions: list) -> str:
    lines = [f"{'policy':<12}{'mean total (s)':>16}{'stdev':>10}{'reschedules':>13}"]
    for p, s in summary.items():
        lines.append(f"{p:<12}{s['mean_total_completion_time']:>16.2f}"
                     f"{s['std_total_completion_time']:>10.2f}{s['mean_reschedule_count']:>13.2f}")
    lines.append("")
    for r in reductions:
        lines.append(f"{r['candidate']} vs {r['baseline']}: {r['reduction_pct']:.2f}% reduction")
    return "\n".join(lines)


# -- grid search ---------------------------------------------------------------------

def parse_grid(text: str) -> list[dict]:
    """``[grid]`` section of ``section.key = v1, v2`` lines -> list of override dicts."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if not parser.has_section("grid") or not parser["grid"]:
        raise UsageError("grid spec needs a non-empty [grid] section")
    default = ExperimentConfig()
    axes = []
    for key, value in parser["grid"].items():
        section, _, name = key.rpartition(".")
        if section not in ("env", "agent", "run"):
            raise UsageError(f"grid key {key!r} must look like env.x, agent.x or run.x")
        fields = asdict_plain(getattr(default, section))
        if name not in fields:
            raise UsageError(f"unknown grid key {key!r}")
        if isinstance(fields[name], tuple):
            values = [_parse_value(v, fields[name]) for v in value.split("|")]
        else:
            values = [_parse_value(v, fields[name]) for v in value.split(",")]
        axes.append([(key, v) for v in values])
    return [dict(combo) for combo in itertools.product(*axes)]


def score_training(rows: Sequence[dict]) -> float:
    """Mean episode reward over the final quarter of iterations."""
    k = max(1, len(rows) // 4)
    vals = [r["mean_episode_reward"] for r in rows[-k:] if r["mean_episode_reward"] is not None]
    return float(np.mean(vals)) if vals else -math.inf


def _tune_trial(args):
    index, cfg, overrides = args
    trial_cfg = cfg.replace(**{**overrides, "run.train_iterations": cfg.run.tune_iterations})
    rows = train(trial_cfg).log_rows
    return index, overrides, score_training(rows), rows


def tune(cfg: ExperimentConfig, grid: Sequence[dict], out_dir=None, workers: int | None = None):
    if not grid:
        raise UsageError("grid is empty")
    jobs = [(i, cfg, g) for i, g in enumerate(grid)]
    workers = workers or cfg.run.workers
    if workers <= 1 or len(jobs) < 2:
        results = [_tune_trial(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_tune_trial, jobs))
    results.sort(key=lambda r: (-r[2], r[0]))
    table = [{"rank": rank, "trial": i, "score": score, **g}
             for rank, (i, g, score, _) in enumerate(results, start=1)]
    best = cfg.replace(**results[0][1])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        keys = sorted({k for g in grid for k in g})
        with open(out_dir / "trials.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["rank", "trial", "score"] + keys)
            w.writeheader()
            for row in table:
                w.writerow({k: _format_value(v) for k, v in row.items()})
        (out_dir / "best.ini").write_text(config_to_ini(best))
    return table, best


# -- workload dumps ----------------------------------------------------------------------

def workload_gen(cfg: ExperimentConfig, seed: int, out, episodes: int = 1, n: int | None = None,
                 window: float | None = None):
    records = load_circuit_records(cfg.circuits or None)
    n = n or cfg.env.n_tasks
    window = window or cfg.env.window
    workloads = [generate_episode_workload(records, seed + k, n, window) for k in range(episodes)]
    dump_workloads(workloads, out)
    return workloads


__all__ = [
    "ExperimentConfig", "RunConfig", "EpisodeReport", "train", "evaluate", "compare", "tune",
    "workload_gen", "load_config", "parse_config", "config_to_ini", "percent_reduction",
    "load_workloads", "build_workloads", "make_env", "make_policy",
]
