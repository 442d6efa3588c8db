"""Regret tracking, stability probing, efficiency/elasticity, scaling and
cross-factor diagnostics.

The cross-factor fit is ordinary least squares via the normal equations with
a permutation test on the capacity-token interaction coefficient; the
permutation distribution reuses a precomputed pseudo-inverse so the test
stays cheap at thousands of permutations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import AugmentedState, ContextSummary, Token, augment
from .costmodel import UnfittableError

REGRET_CLAMP = 1e-12


@dataclass
class RegretTracker:
    """Cumulative shortfall against the full-context optimal policy."""

    cumulative: float = 0.0
    per_step: list = field(default_factory=list)

    def update(self, v_star: float, v_pi: float) -> float:
        # negative gaps are evaluation rounding noise; clamp at zero
        gap = max(0.0, v_star - v_pi)
        self.per_step.append(gap)
        self.cumulative += gap
        return gap


def regret_update(tracker: RegretTracker, v_star: float, v_pi: float) -> RegretTracker:
    """Append one per-step regret observation; regret never goes negative."""
    tracker.update(v_star, v_pi)
    return tracker


def plug_in_mi(pair_counts: Mapping[tuple, int]) -> float:
    """Plug-in mutual information (nats) from joint counts over (x, y) pairs."""
    total = sum(pair_counts.values())
    if total <= 0:
        return 0.0
    px: dict = {}
    py: dict = {}
    for (x, y), n in pair_counts.items():
        px[x] = px.get(x, 0) + n
        py[y] = py.get(y, 0) + n
    mi = 0.0
    for (x, y), n in pair_counts.items():
        if n == 0:
            continue
        p = n / total
        mi += p * math.log(p * total * total / (px[x] * py[y]))
    return max(0.0, mi)


def inject_token(summary: ContextSummary, token: Token, token_cap: int | None) -> ContextSummary:
    """Append a probe token; at the cap the injected token displaces the last."""
    tokens = summary.tokens + (token,)
    if token_cap is not None and len(tokens) > token_cap:
        tokens = summary.tokens[: token_cap - 1] + (token,)
    return ContextSummary(tokens=tokens)


def stability_probe(
    policy,
    s: AugmentedState,
    feature_catalog: Sequence[Token],
    token_cap: int | None = None,
) -> float:
    """Largest action-distribution shift under single-token context injection.

    The decision outcome is the policy's action-probability vector; the
    probe reports the max Euclidean distance over the catalog, so it is
    invariant to catalog order and zero for any context-ignoring policy.
    """
    if not feature_catalog:
        raise ValueError("feature catalog must be non-empty")
    base = policy.action_probabilities(s)
    worst = 0.0
    for tok in feature_catalog:
        perturbed = augment(s.state, inject_token(s.summary, tok, token_cap))
        dist = float(np.linalg.norm(policy.action_probabilities(perturbed) - base))
        worst = max(worst, dist)
    return worst


def context_efficiency(perf_gain: float, tokens_used: float) -> float:
    """Performance gain over the no-context baseline per context token."""
    if not tokens_used > 0:
        raise ValueError("context efficiency is undefined without token usage")
    return perf_gain / tokens_used


def token_elasticity(perf_lo: float, perf_hi: float, tok_lo: float, tok_hi: float) -> float:
    """Relative performance change per relative token-budget change."""
    if not perf_lo > 0:
        raise ValueError("perf_lo must be positive")
    if not tok_lo > 0 or not tok_hi > tok_lo:
        raise ValueError("need 0 < tok_lo < tok_hi")
    return ((perf_hi - perf_lo) / perf_lo) / ((tok_hi - tok_lo) / tok_lo)


def sqrt_scaling_slope(cumulative_regret: Sequence[float], burn_in: int) -> float:
    """Least-squares slope of log cumulative regret against log step index.

    Steps are indexed from 1; only strictly positive regret values past the
    burn-in enter the fit.
    """
    n = len(cumulative_regret)
    if n <= burn_in + 10:
        raise UnfittableError("need more than burn_in + 10 points")
    xs, ys = [], []
    for t in range(burn_in, n):
        value = cumulative_regret[t]
        if value > 0:
            xs.append(math.log(t + 1))
            ys.append(math.log(value))
    if len(xs) < 10:
        raise UnfittableError("fewer than 10 usable (positive) regret points")
    x = np.array(xs)
    y = np.array(ys)
    slope = float(np.polyfit(x, y, 1)[0])
    return slope


# ---------------------------------------------------------------------------
# Cross-factor regression with permutation test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FactorRecord:
    """One per-run outcome with its factor levels."""

    perf: float
    cap: int  # summarizer capacity rank
    tok: int  # token budget
    upd: int  # update-mode rank

    def __post_init__(self):
        if not math.isfinite(self.perf):
            raise ValueError("perf must be finite")


@dataclass(frozen=True)
class CrossFactorFit:
    beta0: float
    beta_cap: float
    beta_tok: float
    beta_upd: float
    beta_interaction: float
    p_value_interaction: float
    n_permutations: int


def _design_matrix(records: Sequence[FactorRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.array(
        [[1.0, r.cap, r.tok, r.upd, r.cap * r.tok] for r in records]
    )
    y = np.array([r.perf for r in records])
    return x, y


def cross_factor_fit(
    records: Sequence[FactorRecord],
    n_permutations: int = 1000,
    seed: int = 0,
) -> CrossFactorFit:
    """OLS on [1, cap, tok, upd, cap*tok] plus a permutation p-value.

    The p-value is the plus-one corrected fraction of label permutations
    whose |interaction coefficient| reaches the observed one.
    """
    if len(records) < 8:
        raise ValueError("need at least 8 records")
    x, y = _design_matrix(records)
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise ValueError("design matrix is rank deficient")
    pinv = np.linalg.pinv(x)
    beta = pinv @ y
    observed = abs(beta[4])
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(len(y))
        beta_perm = pinv @ y[perm]
        if abs(beta_perm[4]) >= observed:
            hits += 1
    p_value = (1 + hits) / (n_permutations + 1)
    return CrossFactorFit(
        beta0=float(beta[0]),
        beta_cap=float(beta[1]),
        beta_tok=float(beta[2]),
        beta_upd=float(beta[3]),
        beta_interaction=float(beta[4]),
        p_value_interaction=p_value,
        n_permutations=n_permutations,
    )


def fit_residuals(records: Sequence[FactorRecord]) -> np.ndarray:
    """Residuals of the cross-factor OLS fit (orthogonal to each column)."""
    x, y = _design_matrix(records)
    beta = np.linalg.pinv(x) @ y
    return y - x @ beta
