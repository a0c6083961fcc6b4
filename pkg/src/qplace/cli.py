"""Command line entry point: ``qplace <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .baselines import BASELINES
from .model import UsageError
from .nn import TrainingError
from .workload import load_workloads

log = logging.getLogger("qplace")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    overrides = {}
    if getattr(args, "episodes", None):
        overrides["run.eval_episodes"] = args.episodes
    if getattr(args, "workers", None):
        overrides["run.workers"] = args.workers
    return cfg.replace(**overrides) if overrides else cfg


def _eval_workloads(args, cfg):
    if args.workload:
        workloads = load_workloads(args.workload)
        seeds = [w.seed for w in workloads if w.seed is not None]
    else:
        seeds = harness.eval_seeds(cfg, seed=args.seed)
        workloads = harness.build_workloads(cfg, seeds)
    return workloads, seeds


def _train_range(cfg, checkpoint):
    if checkpoint:
        from .agent import FrozenPolicy
        meta = FrozenPolicy.load(checkpoint).meta
        if "train_seed_range" in meta:
            return tuple(meta["train_seed_range"])
    return harness.training_seed_range(cfg)


def cmd_train(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"run.train_seed": args.seed})
    out = Path(args.out)

    def progress(row):
        log.info("iter %(iter)d steps %(steps)d reward %(mean_episode_reward)s "
                 "length %(mean_episode_length)s loss %(loss)s", row)

    result = harness.train(cfg, out, progress=progress)
    (out / "config.ini").write_text(harness.config_to_ini(cfg))
    print(f"checkpoint written to {result.checkpoint}")


def cmd_evaluate(args):
    cfg = _config(args)
    workloads, seeds = _eval_workloads(args, cfg)
    policy = args.policy
    if policy == "drlq" and not args.checkpoint:
        raise UsageError("--policy drlq needs --checkpoint")
    if policy not in BASELINES:  # only learned policies have seen training seeds
        checkpoint = args.checkpoint if policy == "drlq" else policy
        harness.check_seed_overlap(seeds, _train_range(cfg, checkpoint), args.allow_overlap)
    reports = harness.evaluate(cfg, policy, workloads, checkpoint=args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_episode_csv(reports, out)
    harness.write_task_csv(reports, out.with_suffix(".tasks.csv"))
    s = harness.summarize(reports)
    print(f"{policy}: mean total completion {s['mean_total_completion_time']:.3f} s "
          f"(stdev {s['std_total_completion_time']:.3f}), "
          f"mean reschedules {s['mean_reschedule_count']:.2f} over {s['episodes']} episodes")


def cmd_compare(args):
    cfg = _config(args)
    workloads, seeds = _eval_workloads(args, cfg)
    policies = args.policies.split(",")
    if "drlq" in policies:
        if not args.checkpoint:
            raise UsageError("comparing drlq needs --checkpoint")
        harness.check_seed_overlap(seeds, _train_range(cfg, args.checkpoint), args.allow_overlap)
    result = harness.compare(cfg, policies, workloads, checkpoint=args.checkpoint, out_dir=args.out)
    print(harness.format_summary(result["summary"], result["reductions"]))


def cmd_tune(args):
    cfg = _config(args)
    grid = harness.parse_grid(Path(args.grid).read_text())
    table, best = harness.tune(cfg, grid, out_dir=args.out)
    for row in table:
        params = ", ".join(f"{k}={v}" for k, v in row.items() if k not in ("rank", "trial", "score"))
        print(f"#{row['rank']} trial {row['trial']} score {row['score']:.4f}  {params}")
    print(f"best config written to {Path(args.out) / 'best.ini'}")


def cmd_workload_gen(args):
    cfg = _config(args)
    seed = 0 if args.seed is None else args.seed
    harness.workload_gen(cfg, seed, args.out, episodes=args.episodes or 1, n=args.n, window=args.window)
    print(f"workload written to {args.out}")


def cmd_defaults(args):
    sys.stdout.write(harness.config_to_ini(harness.ExperimentConfig()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qplace", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI experiment config (see `qplace defaults`)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("train", help="train the DRLQ agent")
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, help_ in (("evaluate", cmd_evaluate, "evaluate one policy"),
                              ("compare", cmd_compare, "compare policies on shared workloads")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        if name == "evaluate":
            sp.add_argument("--policy", default="drlq",
                            help="drlq, greedy, roundrobin, random, or a checkpoint path")
        else:
            sp.add_argument("--policies", default="drlq,greedy,roundrobin,random")
        sp.add_argument("--checkpoint")
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--workload", help="JSON-lines workload dump to replay")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--allow-overlap", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("tune", help="grid search over config values")
    common(sp)
    sp.add_argument("--grid", required=True, help="INI file with a [grid] section")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("workload-gen", help="write a replayable workload dump")
    common(sp)
    sp.add_argument("--episodes", type=int, default=1)
    sp.add_argument("--n", type=int)
    sp.add_argument("--window", type=float)
    sp.set_defaults(func=cmd_workload_gen)

    sp = sub.add_parser("defaults", help="print the default config")
    sp.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
