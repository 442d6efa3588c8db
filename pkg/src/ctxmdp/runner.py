"""Experiment orchestration: seeded runs, baseline comparisons, sweeps, and
report generation.

Every run writes ``<out>/<run_id>/steps.jsonl`` (one schema-stamped JSON
object per step) and ``summary.json``. All numeric output is a pure function
of (config, seed): wall-clock measurement is off by default so repeated runs
are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .agent import Engine, LinearQ, LinearSoftmaxPolicy, MetaPolicy, SoftmaxPolicy, TabularQ
from .config import ExperimentConfig
from .costmodel import LatencySample, UnfittableError, fit_power_law
from .envs import BanditConfig, ContextGridworld, ContextualBandit
from .infotheory import (
    JointCounts,
    MiObjective,
    exact_mi,
    infonce_estimate,
    make_joint_sampler,
    mine_estimate,
    onehot,
    sample_joint,
    train_critic,
    BilinearCritic,
)
from .metrics import FactorRecord, context_efficiency, cross_factor_fit, stability_probe, token_elasticity

SCHEMA_VERSION = 1
MI_TRAIN_STEPS = 200
MI_TRAIN_BATCH = 128
MI_TRAIN_LR = 0.5
MI_EVAL_BATCH = 1024
REPORT_WINDOW = 250

CAPACITY_RANK = {"truncate": 0, "top_frequency": 1, "relevance": 2, "external": 3}
UPDATE_RANK = {"periodic": 0, "sliding_window": 1, "per_step": 2}


@dataclass
class RunResult:
    run_id: str
    baseline: str
    seed: int
    summary: dict
    run_dir: Path
    regret_curve: list


def build_env(config: ExperimentConfig):
    if isinstance(config.env, BanditConfig):
        return ContextualBandit(config.env)
    return ContextGridworld(config.env)


def build_policy(config: ExperimentConfig, env):
    agent = config.agent
    kind = agent.policy
    if kind == "q_tabular":
        return TabularQ(
            num_actions=env.num_actions,
            learning_rate=agent.learning_rate,
            discount=agent.discount,
            epsilon=agent.epsilon,
            epsilon_schedule=agent.epsilon_schedule,
        )
    if kind == "q_linear":
        return LinearQ(
            num_actions=env.num_actions,
            num_states=env.num_states,
            ctx_dim=env.vocab_size,
            learning_rate=agent.learning_rate,
            discount=agent.discount,
            epsilon=agent.epsilon,
            epsilon_schedule=agent.epsilon_schedule,
        )
    if kind == "softmax_tabular":
        return SoftmaxPolicy(
            num_actions=env.num_actions,
            temperature=agent.temperature,
            learning_rate=agent.learning_rate,
            discount=agent.discount,
        )
    return LinearSoftmaxPolicy(
        num_actions=env.num_actions,
        num_states=env.num_states,
        ctx_dim=env.vocab_size,
        temperature=agent.temperature,
        learning_rate=agent.learning_rate,
        discount=agent.discount,
    )


def build_engine(config: ExperimentConfig, baseline: str, seed: int) -> Engine:
    env = build_env(config)
    policy = build_policy(config, env)
    spec = None
    if baseline == "summarized":
        mode_scores = {m: 1.0 for m in range(env.num_modes)}
        spec = config.summarizer.build(mode_scores)
    meta = MetaPolicy(
        entropy_high=config.meta.entropy_high,
        latency_high_ms=config.meta.latency_high_ms,
        age_max=config.meta.age_max,
        mode=config.meta.mode,
        epsilon_meta=config.meta.epsilon_meta,
    )
    return Engine(
        env=env,
        context_source=baseline,
        summarizer_spec=spec,
        policy=policy,
        meta_policy=meta,
        budget=config.budget,
        run_seed=seed,
        cost_c0=config.cost_c0,
        cost_c1=config.cost_c1,
        entropy_window=config.entropy_window,
        history_capacity=config.history_capacity,
        mi_window=config.mi_window,
        measure_wallclock=config.measure_wallclock,
    )


def _event_record(event, run_id: str, seed: int, baseline: str) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "seed": seed,
        "baseline": baseline,
        "t": event.t,
        "episode": event.episode,
        "state": event.state,
        "action": event.action,
        "reward": event.reward,
        "regret_step": event.regret_step,
        "regret_cum": event.regret_cum,
        "tokens": event.token_count,
        "entropy_nats": event.entropy_nats,
        "latency_ms_synth": event.latency_ms_synth,
        "latency_ms_measured": event.latency_ms_measured,
        "meta_action": event.meta_action,
        "refresh_flag": event.refresh_flag,
        "mi_window": event.mi_window,
    }


def _dump_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


def _mi_summary(engine: Engine, seed: int) -> dict:
    """Exact windowed MI plus trained variational estimates on run pairs."""
    counts = engine._mi_counts
    modes = sorted({m for m, _ in counts})
    evidence = sorted({e for _, e in counts})
    out = {"window_final": 0.0, "mine": 0.0, "infonce": 0.0}
    if not counts:
        return out
    matrix = np.zeros((max(modes) + 1, len(evidence)), dtype=int)
    col = {e: j for j, e in enumerate(evidence)}
    for (m, e), n in counts.items():
        matrix[m, col[e]] = n
    joint = JointCounts(matrix)
    out["window_final"] = exact_mi(joint)
    if matrix.shape[0] < 2 or matrix.shape[1] < 2 or joint.total < 8:
        return out
    d_s, d_c = joint.shape
    sampler = make_joint_sampler(joint, MI_TRAIN_BATCH)
    rng = np.random.default_rng([seed, 17])
    eval_s, eval_c = sample_joint(joint, MI_EVAL_BATCH, rng)
    s_hot, c_hot = onehot(eval_s, d_s), onehot(eval_c, d_c)
    perm = rng.permutation(MI_EVAL_BATCH)
    for objective, key in ((MiObjective.MINE, "mine"), (MiObjective.INFONCE, "infonce")):
        params, _ = train_critic(
            objective, sampler, BilinearCritic.zeros(d_s, d_c),
            MI_TRAIN_STEPS, MI_TRAIN_LR, np.random.default_rng([seed, 19]),
        )
        if objective is MiObjective.MINE:
            out[key] = mine_estimate((s_hot, c_hot), (s_hot, c_hot[perm]), params)
        else:
            out[key] = infonce_estimate((s_hot, c_hot), params)
    return out


def _stability_summary(engine: Engine, baseline: str, config: ExperimentConfig) -> float:
    env = engine.env
    n_probe_tokens = min(8, env.vocab_size - env.num_modes)
    catalog = list(range(env.num_modes, env.num_modes + n_probe_tokens))
    if not catalog:
        return 0.0
    states = list(engine.probe_states.values())[-16:]
    if not states:
        return 0.0
    cap = config.budget.token_cap if baseline == "summarized" else None
    values = [
        stability_probe(engine.policy, s, catalog, token_cap=cap) for s in states
    ]
    return float(np.mean(values))


def _power_law_summary(samples: list[LatencySample]) -> dict:
    try:
        fit = fit_power_law(samples)
    except UnfittableError as exc:
        return {"status": "unfittable", "reason": str(exc)}
    return {
        "status": "ok", "beta0": fit.beta0, "beta1": fit.beta1,
        "alpha": fit.alpha, "r_squared": fit.r_squared,
    }


def run_single(
    config: ExperimentConfig,
    baseline: str,
    seed: int,
    out_root: Path,
    run_id: str | None = None,
    tags: dict | None = None,
) -> RunResult:
    """Execute one (baseline, seed) cell and write its artifacts."""
    run_id = run_id or f"{baseline}_seed{seed}"
    run_dir = Path(out_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    engine = build_engine(config, baseline, seed)
    env = engine.env

    steps = 0
    total_reward = 0.0
    successes = 0
    error = None
    regret_curve: list[float] = []
    with open(run_dir / "steps.jsonl", "w", encoding="utf-8") as fh:
        for episode in range(config.agent.episodes):
            trace = engine.run_episode(episode)
            for event in trace.events:
                fh.write(_dump_line(_event_record(event, run_id, seed, baseline)))
                regret_curve.append(event.regret_cum)
            steps += len(trace.events)
            total_reward += trace.total_reward
            successes += int(trace.reached_goal)
            if trace.aborted:
                error = trace.error
                break

    episodes_run = episode + 1
    mean_reward = total_reward / max(1, episodes_run)
    is_gridworld = isinstance(env, ContextGridworld)
    perf = successes / max(1, episodes_run) if is_gridworld else mean_reward

    mean_latency = engine.latency_total / steps if steps else 0.0
    summary = {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "baseline": baseline,
        "seed": seed,
        "env_type": "gridworld" if is_gridworld else "bandit",
        "status": "partial" if error else "ok",
        "episodes": episodes_run,
        "steps": steps,
        "total_reward": total_reward,
        "mean_reward": mean_reward,
        "perf": perf,
        "cumulative_regret": engine.regret.cumulative,
        "mean_latency_ms_synth": mean_latency,
        "mean_latency_ms_measured": engine.measured_total / steps if steps else 0.0,
        "mean_tokens": engine.token_total / steps if steps else 0.0,
        "mi": _mi_summary(engine, seed),
        "power_law": _power_law_summary(engine.latency_samples),
        "stability": _stability_summary(engine, baseline, config),
        "config_echo": {
            "token_cap": config.budget.token_cap,
            "update_mode": config.budget.update_mode.kind,
            "update_param": config.budget.update_mode.param,
            "summarizer": config.summarizer.kind,
            "policy": config.agent.policy,
            "episodes": config.agent.episodes,
            "cost_c0": config.cost_c0,
            "cost_c1": config.cost_c1,
        },
    }
    if is_gridworld:
        summary["success_rate"] = perf
    if error:
        summary["error"] = error
    if tags:
        summary["tags"] = tags
    _write_summary(run_dir, summary)
    return RunResult(
        run_id=run_id, baseline=baseline, seed=seed,
        summary=summary, run_dir=run_dir, regret_curve=regret_curve,
    )


def _write_summary(run_dir: Path, summary: dict) -> None:
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run(config: ExperimentConfig, out_root: Path) -> list[RunResult]:
    """Run every configured (baseline, seed) cell and cross-fill efficiency."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    results: list[RunResult] = []
    for baseline in config.baselines:
        for seed in config.seeds:
            results.append(run_single(config, baseline, seed, out_root))
    _fill_efficiency(results)
    for result in results:
        _write_summary(result.run_dir, result.summary)
    return results


def _fill_efficiency(results: list[RunResult]) -> None:
    """Efficiency = (perf - no-context perf at the same seed) / mean tokens."""
    none_perf = {
        r.seed: r.summary["perf"] for r in results if r.baseline == "none"
    }
    for r in results:
        if r.baseline == "none" or r.seed not in none_perf:
            continue
        tokens = r.summary["mean_tokens"]
        if tokens > 0:
            gain = r.summary["perf"] - none_perf[r.seed]
            r.summary["efficiency"] = context_efficiency(gain, tokens)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    import dataclasses

    if axis == "tokens":
        budget = dataclasses.replace(config.budget, token_cap=int(value))
        return dataclasses.replace(config, budget=budget)
    if axis == "update_mode":
        from .config import _parse_update_mode

        problems: list[str] = []
        mode = _parse_update_mode(str(value), "sweep.update_mode", problems)
        if problems:
            raise ValueError("; ".join(problems))
        budget = dataclasses.replace(config.budget, update_mode=mode)
        return dataclasses.replace(config, budget=budget)
    if axis == "summarizer":
        kind = str(value)
        if kind not in CAPACITY_RANK:
            raise ValueError(f"unknown summarizer {kind!r}")
        summarizer = dataclasses.replace(config.summarizer, kind=kind)
        return dataclasses.replace(config, summarizer=summarizer)
    raise ValueError(f"unknown sweep axis {axis!r}")


def _value_tag(value) -> str:
    return str(value).replace(":", "-")


def _sweep_cell(args) -> tuple:
    config, axis, value, seed, out_root = args
    cell_config = _apply_axis(config, axis, value)
    run_id = f"{axis}-{_value_tag(value)}_summarized_seed{seed}"
    result = run_single(cell_config, "summarized", seed, Path(out_root), run_id=run_id,
                        tags={"axis": axis, "value": str(value)})
    return (value, seed, result.summary, str(result.run_dir))


def sweep(
    config: ExperimentConfig,
    axis: str,
    values: list,
    out_root: Path,
    jobs: int = 1,
) -> list[dict]:
    """Cartesian (value, seed) sweep of the summarized baseline.

    A no-context reference is run once per seed for the efficiency column.
    Returns the table rows that were written to ``sweep_<axis>.csv``.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    none_results = {
        seed: run_single(config, "none", seed, out_root) for seed in config.seeds
    }

    cells = [(config, axis, value, seed, str(out_root))
             for value in values for seed in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_cell, cells))
    else:
        outcomes = [_sweep_cell(cell) for cell in cells]

    by_cell = {(value, seed): summary for value, seed, summary, _ in outcomes}
    rows = []
    for vi, value in enumerate(values):
        for seed in config.seeds:
            summary = by_cell[(value, seed)]
            perf = summary["perf"]
            tokens = summary["mean_tokens"]
            latency = summary["mean_latency_ms_synth"]
            none_perf = none_results[seed].summary["perf"]
            efficiency = ""
            if tokens > 0:
                efficiency = context_efficiency(perf - none_perf, tokens)
            reward_per_ms = perf / latency if latency > 0 else ""
            elasticity = ""
            if axis == "tokens" and vi > 0:
                prev = by_cell[(values[vi - 1], seed)]
                try:
                    elasticity = token_elasticity(
                        prev["perf"], perf, float(values[vi - 1]), float(value)
                    )
                except ValueError:
                    elasticity = ""
            rows.append({
                "axis": axis,
                "value": value,
                "seed": seed,
                "baseline": "summarized",
                "perf": perf,
                "cumulative_regret": summary["cumulative_regret"],
                "mean_latency_ms_synth": latency,
                "mean_tokens": tokens,
                "efficiency": efficiency,
                "reward_per_ms": reward_per_ms,
                "elasticity_vs_prev": elasticity,
            })

    path = out_root / f"sweep_{axis}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _read_steps(run_dir: Path) -> list[dict]:
    path = run_dir / "steps.jsonl"
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _windowed_series(records: list[dict], window: int) -> list[tuple[float, float]]:
    """(mean windowed MI, mean per-step regret) per disjoint window."""
    out = []
    for start in range(0, len(records) - window + 1, window):
        chunk = records[start:start + window]
        mi = float(np.mean([r["mi_window"] for r in chunk]))
        regret = float(np.mean([r["regret_step"] for r in chunk]))
        out.append((mi, regret))
    return out


def report(run_root: Path) -> dict:
    """Aggregate analyses over every run directory under ``run_root``."""
    run_root = Path(run_root)
    summaries = []
    for summary_path in sorted(run_root.glob("*/summary.json")):
        with open(summary_path, encoding="utf-8") as fh:
            summaries.append((summary_path.parent, json.load(fh)))
    out: dict = {"schema_version": SCHEMA_VERSION, "notices": []}
    if not summaries:
        out["status"] = "empty"
        out["notices"].append("no run summaries found; nothing to report")
        return out
    out["status"] = "ok"
    out["runs"] = len(summaries)

    # (a) pooled power-law fit over refresh-event latency samples
    samples = []
    mi_regret_points = []
    curve_rows = []
    for run_dir, summary in summaries:
        if summary["baseline"] == "none":
            continue
        records = _read_steps(run_dir)
        for r in records:
            if r["refresh_flag"] and r["latency_ms_synth"] > 0:
                samples.append(LatencySample(
                    entropy_nats=r["entropy_nats"],
                    latency_ms=r["latency_ms_synth"],
                    tokens=r["tokens"],
                ))
        mi_regret_points.extend(_windowed_series(records, REPORT_WINDOW))
        stride = max(1, len(records) // 500)
        curve_rows.extend(
            {"run_id": summary["run_id"], "t": r["t"], "regret_cum": r["regret_cum"]}
            for r in records[::stride]
        )
    try:
        fit = fit_power_law(samples)
        out["power_law"] = {
            "beta0": fit.beta0, "beta1": fit.beta1,
            "alpha": fit.alpha, "r_squared": fit.r_squared,
            "samples": len(samples),
        }
    except UnfittableError as exc:
        out["notices"].append(f"power-law fit skipped: {exc}")

    # (b) Spearman correlation between windowed MI and windowed regret
    if len(mi_regret_points) >= 4:
        mi_vals = [p[0] for p in mi_regret_points]
        regret_vals = [p[1] for p in mi_regret_points]
        rho, pval = stats.spearmanr(mi_vals, regret_vals)
        out["mi_regret_spearman"] = {
            "rho": float(rho), "p_value": float(pval), "windows": len(mi_regret_points),
        }
    else:
        out["notices"].append("mi-regret correlation skipped: too few windows")

    # (c) cross-factor regression when the sweep axes permit
    records = []
    for _, summary in summaries:
        if summary["baseline"] != "summarized":
            continue
        echo = summary.get("config_echo", {})
        if not echo:
            continue
        records.append(FactorRecord(
            perf=summary["perf"],
            cap=CAPACITY_RANK.get(echo.get("summarizer"), 0),
            tok=echo.get("token_cap", 0),
            upd=UPDATE_RANK.get(echo.get("update_mode"), 0),
        ))
    try:
        if len(records) < 8:
            raise ValueError("fewer than 8 summarized runs")
        fit = cross_factor_fit(records)
        out["cross_factor"] = {
            "beta0": fit.beta0, "beta_cap": fit.beta_cap, "beta_tok": fit.beta_tok,
            "beta_upd": fit.beta_upd, "beta_interaction": fit.beta_interaction,
            "p_value_interaction": fit.p_value_interaction,
        }
    except ValueError as exc:
        out["notices"].append(f"cross-factor regression skipped: {exc}")

    _write_report_files(run_root, out, samples, mi_regret_points, curve_rows)
    return out


def _write_report_files(run_root, out, samples, mi_regret_points, curve_rows) -> None:
    with open(run_root / "report.json", "w", encoding="utf-8") as fh:
        json.dump(out, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_csv(
        run_root / "plot_latency_vs_entropy.csv",
        ["entropy_nats", "latency_ms"],
        [[s.entropy_nats, s.latency_ms] for s in samples],
    )
    _write_csv(
        run_root / "plot_mi_vs_regret.csv",
        ["mi_window", "regret_window"],
        [[mi, reg] for mi, reg in mi_regret_points],
    )
    _write_csv(
        run_root / "plot_regret_curves.csv",
        ["run_id", "t", "regret_cum"],
        [[r["run_id"], r["t"], r["regret_cum"]] for r in curve_rows],
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
