"""Command-line interface.

Subcommands: run, sweep, report, fit-latency, estimate-mi.
Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .costmodel import LatencySample, UnfittableError, fit_power_law
from .infotheory import (
    BilinearCritic,
    JointCounts,
    MiObjective,
    exact_mi,
    infonce_estimate,
    make_joint_sampler,
    mine_estimate,
    onehot,
    sample_joint,
    train_critic,
)
from . import runner

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxmdp",
        description="Context-augmented MDP experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run all configured baselines and seeds")
    p_run.add_argument("--config", required=True, help="experiment config JSON")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seeds", default=None, help="comma-separated seed override")

    p_sweep = sub.add_parser("sweep", help="sweep one axis of the config")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--seeds", default=None)
    p_sweep.add_argument(
        "--axis", required=True, choices=["tokens", "update_mode", "summarizer"]
    )
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--jobs", type=int, default=1)

    p_report = sub.add_parser("report", help="aggregate analyses over a run directory")
    p_report.add_argument("--out", required=True, help="run directory to analyze")

    p_fit = sub.add_parser("fit-latency", help="power-law fit over a CSV of samples")
    p_fit.add_argument("--input", required=True, help="CSV with entropy,latency columns")
    p_fit.add_argument("--alpha-lo", type=float, default=0.5)
    p_fit.add_argument("--alpha-hi", type=float, default=2.0)
    p_fit.add_argument("--grid", type=int, default=151)

    p_mi = sub.add_parser("estimate-mi", help="MI estimates over a counts file")
    p_mi.add_argument("--counts", required=True, help="JSON 2-D integer matrix")
    p_mi.add_argument(
        "--estimator", default="all", choices=["exact", "mine", "infonce", "all"]
    )
    p_mi.add_argument("--steps", type=int, default=500)
    p_mi.add_argument("--batch", type=int, default=256)
    p_mi.add_argument("--lr", type=float, default=0.5)
    p_mi.add_argument("--eval-batch", type=int, default=2048)
    p_mi.add_argument("--seed", type=int, default=0)
    return parser


def _parse_seeds(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise ConfigError([f"--seeds: {exc}"]) from exc


def _load(args) -> tuple:
    import dataclasses

    config = load_config(args.config)
    seeds = _parse_seeds(getattr(args, "seeds", None))
    if seeds is not None:
        if not seeds:
            raise ConfigError(["--seeds: need at least one seed"])
        config = dataclasses.replace(config, seeds=seeds)
    out = Path(args.out) if args.out else Path(config.out_dir)
    return config, out


def _cmd_run(args) -> int:
    config, out = _load(args)
    results = runner.run(config, out)
    partial = [r for r in results if r.summary["status"] != "ok"]
    for result in results:
        print(
            f"{result.run_id}: perf={result.summary['perf']:.4f} "
            f"regret={result.summary['cumulative_regret']:.3f} "
            f"status={result.summary['status']}"
        )
    if partial:
        print(f"{len(partial)} run(s) finished partially", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _parse_axis_values(axis: str, text: str) -> list:
    values = [part.strip() for part in text.split(",") if part.strip() != ""]
    if not values:
        raise ConfigError(["--values: need at least one value"])
    if axis == "tokens":
        try:
            return [int(v) for v in values]
        except ValueError as exc:
            raise ConfigError([f"--values: {exc}"]) from exc
    return values


def _cmd_sweep(args) -> int:
    config, out = _load(args)
    values = _parse_axis_values(args.axis, args.values)
    rows = runner.sweep(config, args.axis, values, out, jobs=args.jobs)
    print(f"wrote {len(rows)} sweep rows to {out / f'sweep_{args.axis}.csv'}")
    return EXIT_OK


def _cmd_report(args) -> int:
    result = runner.report(Path(args.out))
    for notice in result.get("notices", []):
        print(f"notice: {notice}")
    if result["status"] == "empty":
        return EXIT_OK
    print(json.dumps({k: v for k, v in result.items() if k != "notices"}, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_fit_latency(args) -> int:
    samples = []
    with open(args.input, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"entropy", "latency"} <= set(reader.fieldnames):
            raise ConfigError([f"{args.input}: expected 'entropy' and 'latency' columns"])
        for row in reader:
            samples.append(
                LatencySample(
                    entropy_nats=float(row["entropy"]), latency_ms=float(row["latency"])
                )
            )
    fit = fit_power_law(samples, (args.alpha_lo, args.alpha_hi), args.grid)
    print(json.dumps({
        "beta0": fit.beta0, "beta1": fit.beta1,
        "alpha": fit.alpha, "r_squared": fit.r_squared,
    }, sort_keys=True))
    return EXIT_OK


def _cmd_estimate_mi(args) -> int:
    with open(args.counts, encoding="utf-8") as fh:
        matrix = np.array(json.load(fh), dtype=int)
    joint = JointCounts(matrix)
    out: dict = {"exact": exact_mi(joint)}
    if args.estimator in ("mine", "infonce", "all"):
        d_s, d_c = joint.shape
        rng = np.random.default_rng(args.seed)
        eval_s, eval_c = sample_joint(joint, args.eval_batch, rng)
        s_hot, c_hot = onehot(eval_s, d_s), onehot(eval_c, d_c)
        perm = rng.permutation(args.eval_batch)
        sampler = make_joint_sampler(joint, args.batch)
        wanted = ("mine", "infonce") if args.estimator == "all" else (args.estimator,)
        for name in wanted:
            objective = MiObjective.MINE if name == "mine" else MiObjective.INFONCE
            params, _ = train_critic(
                objective, sampler, BilinearCritic.zeros(d_s, d_c),
                args.steps, args.lr, np.random.default_rng(args.seed + 1),
            )
            if objective is MiObjective.MINE:
                out[name] = mine_estimate((s_hot, c_hot), (s_hot, c_hot[perm]), params)
            else:
                out[name] = infonce_estimate((s_hot, c_hot), params)
    if args.estimator in ("mine", "infonce"):
        del out["exact"]
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
    "fit-latency": _cmd_fit_latency,
    "estimate-mi": _cmd_estimate_mi,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except UnfittableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
