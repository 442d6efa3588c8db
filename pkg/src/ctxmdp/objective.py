"""Lagrangian objective, approximate-sufficiency KL, sensitivity norms, and
the warm-up weighted joint loss.

The sufficiency divergence is computed exactly for tabular action
distributions; a discriminator-based estimator interface is declared for
callers that cannot enumerate the conditionals, but no implementation ships.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import BudgetSpec
from .costmodel import hinge_penalties

KL_SMOOTHING = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Weights of the auxiliary terms in the joint training loss."""

    eta1: float = 1.0       # mutual-information bonus (entered as -I)
    eta2: float = 5e-3      # summary entropy
    eta3: float = 1e-3      # sensitivity excess
    eta4: float = 1.0       # budget hinge penalties
    eta5: float = 1e-2      # sufficiency epsilon
    warmup_fraction: float = 0.10
    l_q: float = 10.0       # sensitivity bound on the value head
    l_pi: float = 10.0      # sensitivity bound on the policy head

    def __post_init__(self):
        for name in ("eta1", "eta2", "eta3", "eta4", "eta5"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class ObjectiveComponents:
    """Per-evaluation snapshot of every term entering the objectives."""

    mi_estimate: float
    entropy_nats: float
    latency_ms: float
    tokens: int
    epsilon_hat: float = 0.0
    sensitivity_q: float = 0.0
    sensitivity_pi: float = 0.0

    def __post_init__(self):
        for name in (
            "mi_estimate", "entropy_nats", "latency_ms",
            "epsilon_hat", "sensitivity_q", "sensitivity_pi",
        ):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.epsilon_hat < 0 or self.sensitivity_q < 0 or self.sensitivity_pi < 0:
            raise ValueError("epsilon_hat and sensitivity norms must be nonnegative")


def lagrangian(components: ObjectiveComponents, budget: BudgetSpec) -> float:
    """-I + lambda*H + mu*[latency - B]_+ + nu*[tokens - T]_+ (minimized)."""
    lat_pen, tok_pen = hinge_penalties(components.latency_ms, components.tokens, budget)
    return (
        -components.mi_estimate
        + budget.lam * components.entropy_nats
        + lat_pen
        + tok_pen
    )


def sufficiency_epsilon(
    pi_full: np.ndarray,
    pi_summary: np.ndarray,
    state_weights: Sequence[float] | None = None,
) -> float:
    """Weighted mean over states of KL(pi_full(.|s) || pi_summary(.|s)).

    Inputs are (states, actions) matrices of action distributions. Additive
    smoothing (delta = 1e-8) engages only when a row contains probabilities
    below delta, so well-supported softmax conditionals are compared exactly.
    """
    p = np.asarray(pi_full, dtype=float)
    q = np.asarray(pi_summary, dtype=float)
    if p.shape != q.shape or p.ndim != 2:
        raise ValueError("distributions must be matching (states, actions) matrices")
    for name, mat in (("pi_full", p), ("pi_summary", q)):
        if np.any(mat < 0):
            raise ValueError(f"{name} has negative probabilities")
        if np.any(np.abs(mat.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError(f"{name} rows must sum to 1 within 1e-9")
    if state_weights is None:
        weights = np.full(p.shape[0], 1.0 / p.shape[0])
    else:
        weights = np.asarray(state_weights, dtype=float)
        if weights.shape != (p.shape[0],):
            raise ValueError("state_weights must have one entry per state")
        if np.any(weights < 0):
            raise ValueError("state weights must be nonnegative")
        total = weights.sum()
        if total <= 0:
            raise ValueError("state weights must not all be zero")
        weights = weights / total

    n_actions = p.shape[1]
    total_kl = 0.0
    for s in range(p.shape[0]):
        ps, qs = p[s], q[s]
        if np.any(ps < KL_SMOOTHING) or np.any(qs < KL_SMOOTHING):
            ps = (ps + KL_SMOOTHING) / (1.0 + n_actions * KL_SMOOTHING)
            qs = (qs + KL_SMOOTHING) / (1.0 + n_actions * KL_SMOOTHING)
        kl = float(np.sum(ps * np.log(ps / qs)))
        total_kl += weights[s] * max(0.0, kl)
    return total_kl


class SufficiencyEstimator(Protocol):
    """Alternative estimator interface for non-enumerable conditionals.

    A discriminator-based implementation would estimate the divergence from
    samples of the two conditionals; at desk scale the exact computation
    above is always available, so none ships.
    """

    def estimate(self, full_samples: np.ndarray, summary_samples: np.ndarray) -> float:
        ...


def sensitivity_norms(
    q_fn: Callable[[np.ndarray], float],
    logpi_fn: Callable[[np.ndarray], float],
    c_embed: np.ndarray,
    probe_scale: float,
) -> tuple[float, float]:
    """Central finite-difference gradient norms along embedding coordinates.

    ``q_fn`` and ``logpi_fn`` map a context embedding to the scalar being
    probed (value of the taken action / its log probability). Returns the
    Euclidean norms of the two difference-quotient vectors.
    """
    if not probe_scale > 0:
        raise ValueError("probe_scale must be positive")
    c = np.asarray(c_embed, dtype=float)
    grads_q = np.zeros(len(c))
    grads_pi = np.zeros(len(c))
    for i in range(len(c)):
        bump = np.zeros(len(c))
        bump[i] = probe_scale
        grads_q[i] = (q_fn(c + bump) - q_fn(c - bump)) / (2.0 * probe_scale)
        grads_pi[i] = (logpi_fn(c + bump) - logpi_fn(c - bump)) / (2.0 * probe_scale)
    return float(np.linalg.norm(grads_q)), float(np.linalg.norm(grads_pi))


def sensitivity_excess(norm: float, bound: float) -> float:
    """Regularizer contribution: how far a sensitivity norm exceeds its bound."""
    return max(0.0, norm - bound)


def warmup_weight(progress: float, warmup_fraction: float) -> float:
    """Linear ramp from 0 to 1 over the warm-up fraction, then flat at 1."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    if warmup_fraction <= 0.0:
        return 1.0
    return min(1.0, progress / warmup_fraction)


def joint_loss(
    rl_loss: float,
    components: ObjectiveComponents,
    weights: LossWeights,
    progress: float,
    budget: BudgetSpec,
) -> float:
    """RL loss plus warm-up weighted auxiliary terms.

    At progress 0 the result is exactly the RL loss; from the end of the
    warm-up fraction onward the auxiliary terms enter at full weight.
    """
    if not math.isfinite(rl_loss):
        raise ValueError("rl_loss must be finite")
    w = warmup_weight(progress, weights.warmup_fraction)
    lat_pen, tok_pen = hinge_penalties(components.latency_ms, components.tokens, budget)
    sens = sensitivity_excess(components.sensitivity_q, weights.l_q) + sensitivity_excess(
        components.sensitivity_pi, weights.l_pi
    )
    aux = (
        weights.eta1 * (-components.mi_estimate)
        + weights.eta2 * components.entropy_nats
        + weights.eta3 * sens
        + weights.eta4 * (lat_pen + tok_pen)
        + weights.eta5 * components.epsilon_hat
    )
    return rl_loss + w * aux
