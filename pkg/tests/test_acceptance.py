"""Numbered acceptance criteria.  Each test prints one PASS/FAIL line, and the
terminal summary repeats them all.  Criteria 1-3 share one full training run
(100 iterations of 1000 steps) evaluated on 100 held-out episodes."""
import itertools
import random
from fractions import Fraction

import numpy as np
import pytest

from qplace import harness
from qplace.agent import FrozenPolicy
from qplace.env import placement_reward
from qplace.model import QNodeSpec, QTask, estimate_execution_time
from qplace.nn import CategoricalQNet, Dense, NoisyDense
from qplace.sim import DataCenter
from test_agent import overfit_losses, projection_max_deviation, run_nstep_log_replay, sampling_max_deviation
from test_env import REWARD_GRID
from test_nn import layer_grad_check, numeric_grad, rel_error
from test_sim import fifo_oracle, registry

N_TASKS = 60


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    cfg = harness.ExperimentConfig()
    out = tmp_path_factory.mktemp("full_run")
    result = harness.train(cfg, out)
    seeds = harness.eval_seeds(cfg)
    lo, hi = FrozenPolicy.load(result.checkpoint).meta["train_seed_range"]
    harness.check_seed_overlap(seeds, (lo, hi))
    workloads = harness.build_workloads(cfg, seeds)
    cmp = harness.compare(cfg, ["drlq", "greedy", "roundrobin", "random"], workloads,
                          checkpoint=result.checkpoint, out_dir=out / "compare")
    print()
    print(harness.format_summary(cmp["summary"], cmp["reductions"]))
    return {"cfg": cfg, "result": result, "workloads": workloads, **cmp}


def reduction(run, baseline):
    return next(r["reduction_pct"] for r in run["reductions"]
                if r["candidate"] == "drlq" and r["baseline"] == baseline)


@pytest.mark.slow
def test_criterion_1_beats_baselines(full_run, criterion):
    s = full_run["summary"]
    drlq = s["drlq"]["mean_total_completion_time"]
    red = {b: reduction(full_run, b) for b in ("greedy", "roundrobin", "random")}
    ok = (all(drlq < s[b]["mean_total_completion_time"] for b in red)
          and red["greedy"] >= 15 and red["roundrobin"] >= 40 and red["random"] >= 40
          and s["drlq"]["episodes"] == 100 and full_run["result"].log_rows[-1]["steps"] <= 100_000)
    detail = (f"drlq {drlq:.2f}s; reduction vs greedy {red['greedy']:.2f}% (>=15), "
              f"roundrobin {red['roundrobin']:.2f}% (>=40), random {red['random']:.2f}% (>=40)")
    criterion(1, ok, detail)


@pytest.mark.slow
def test_criterion_2_rescheduling(full_run, criterion):
    s = full_run["summary"]
    tasks = [t for w in full_run["workloads"] for t in w.tasks]
    smallest = min(n.qubits for n in harness.make_env(full_run["cfg"]).registry.nodes)
    wide = np.mean([t.qubits > smallest for t in tasks])
    drlq, greedy = s["drlq"]["mean_reschedule_count"], s["greedy"]["mean_reschedule_count"]
    ok = drlq <= 0.5 and greedy > 5 and wide >= 0.2
    criterion(2, ok, f"drlq {drlq:.2f}/episode (<=0.5), greedy {greedy:.2f} (>5), "
                     f"{wide:.1%} of tasks wider than {smallest} qubits (>=20%)")


@pytest.mark.slow
def test_criterion_3_episode_length_converges(full_run, criterion):
    rows = full_run["result"].log_rows[-10:]
    mean_len = float(np.mean([r["mean_episode_length"] for r in rows]))
    ok = len(full_run["result"].log_rows) == 100 and abs(mean_len - N_TASKS) <= 0.05 * N_TASKS
    criterion(3, ok, f"final-10-iteration mean episode length {mean_len:.3f} (60 +/- 3)")


def test_criterion_4_exec_time_exact(criterion):
    rng = random.Random(4)
    worst = Fraction(0)
    for _ in range(1000):
        depth, shots = rng.randint(1, 100_000), rng.randint(1, 100_000)
        d1cps = rng.uniform(1.0, 1e6)
        got = estimate_execution_time(QTask(0, 1, depth, shots, 0.0),
                                      QNodeSpec(0, "n", 127, 64, d1cps), depth)
        exact = Fraction(depth * shots) / Fraction(d1cps)
        worst = max(worst, abs(Fraction(got) - exact) / exact)
    criterion(4, worst < Fraction(1, 10**12), f"max relative error {float(worst):.3e} over 1000 inputs (<1e-12)")


def test_criterion_5_fifo_exhaustive(criterion):
    nodes = [QNodeSpec(0, "a", 16, 32, 2048.0), QNodeSpec(1, "b", 27, 64, 4096.0)]
    specs = [(0.0, 40, 256, 5), (0.25, 64, 512, 20), (1.0, 8, 1024, 12)]
    mismatches = []
    assignments = list(itertools.product(range(2), repeat=3))
    for assignment in assignments:
        tasks = [QTask(i, q, d, s, a) for i, (a, d, s, q) in enumerate(specs)]
        dc = DataCenter(registry(*nodes), tasks)
        got = {}
        for t, nid in zip(tasks, assignment):
            out = dc.try_place(t.id, nid, now=t.arrival)
            got[t.id] = out.total_time if out.accepted else None
        fresh = [QTask(i, q, d, s, a) for i, (a, d, s, q) in enumerate(specs)]
        if got != fifo_oracle(fresh, assignment, nodes, {i: s[0] for i, s in enumerate(specs)}):
            mismatches.append(assignment)
    criterion(5, not mismatches, f"{len(assignments) - len(mismatches)}/{len(assignments)} assignments exact")


def test_criterion_6_reward_grid(criterion):
    bad = 0
    for t, kappa, ok, alpha, delta in REWARD_GRID:
        want = (1.0 / t) * (1.0 - alpha * kappa) if ok else delta * (1.0 + alpha * kappa)
        bad += placement_reward(ok, kappa, alpha, delta, t) != want
    criterion(6, bad == 0, f"{len(REWARD_GRID) - bad}/{len(REWARD_GRID)} grid points exact")


def test_criterion_7_projection(criterion):
    dev, mass = projection_max_deviation(cases=50, seed=7)
    criterion(7, dev < 1e-9 and mass < 1e-9,
              f"max deviation {dev:.2e} (<1e-9), max |row sum - 1| {mass:.2e} (<1e-9)")


def test_criterion_8_gradient_check(criterion):
    rng = np.random.default_rng(8)
    errors = {}
    for act in ("relu", "identity"):
        errors[f"dense/{act}"] = layer_grad_check(Dense(7, 5, act, rng), rng)
        noisy = NoisyDense(7, 5, act, rng)
        noisy.resample_noise(rng)
        errors[f"noisy/{act}"] = layer_grad_check(noisy, rng)
    net = CategoricalQNet(6, 3, n_atoms=5, hidden=(8, 8), seed=9)
    net.resample_noise(rng)
    x, g = rng.normal(size=(3, 6)), rng.normal(size=(3, 3, 5))

    def loss():
        return float(np.sum(g * net.logits(x)))

    loss()
    net.backward(g)
    analytic = {k: v.copy() for k, v in net.named_grads().items()}
    errors["network"] = max(rel_error(analytic[k], numeric_grad(loss, p))
                            for k, p in net.named_params().items())
    worst = max(errors.values())
    criterion(8, worst < 1e-4, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
              + " (<1e-4)")


def test_criterion_9_nstep_replay(criterion):
    criterion(9, run_nstep_log_replay(10_000, seed=9), "10000 random episodes match the reward-log oracle")


def test_criterion_10_sampling_and_determinism(criterion, tmp_path):
    dev = max(sampling_max_deviation([4.0, 1.0], 100_000, alpha=1.0, seed=10),
              sampling_max_deviation([0.3, 1.0, 2.5, 0.7, 4.0, 1.5], 100_000, seed=11))
    cfg = harness.ExperimentConfig().replace(**{"run.train_iterations": 3})
    harness.train(cfg, tmp_path / "a")
    harness.train(cfg, tmp_path / "b")
    same = ((tmp_path / "a/train_log.jsonl").read_bytes() == (tmp_path / "b/train_log.jsonl").read_bytes()
            and (tmp_path / "a/checkpoint.json").read_bytes() == (tmp_path / "b/checkpoint.json").read_bytes())
    criterion(10, dev < 0.02 and same,
              f"max |freq - P(i)| {dev:.4f} over 1e5 draws (<0.02); repeated 3000-step runs identical: {same}")


def test_criterion_11_overfit(criterion):
    losses = overfit_losses(200)
    ratio = min(losses) / losses[0]
    criterion(11, ratio < 0.1, f"loss {losses[0]:.3f} -> {min(losses):.2e} within 200 steps (ratio {ratio:.1e} < 0.1)")
