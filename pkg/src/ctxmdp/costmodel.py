"""Latency accounting: synthetic cost model, power-law fits, budget hinges.

The synthetic model is a deterministic affine stand-in for wall-clock time
so experiments reproduce bit-for-bit. The power-law fit regresses latency
on entropy^alpha over a grid of alpha values, solving an ordinary linear
least-squares problem at each grid point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BudgetSpec

# Wider than the modeled alpha range [1, 1.5]: measured fits are reported
# down to 0.98, so the default search space must extend past both ends.
DEFAULT_ALPHA_RANGE = (0.5, 2.0)
DEFAULT_ALPHA_GRID = 151


@dataclass(frozen=True)
class LatencySample:
    """One (entropy, latency) observation; source marks synthetic vs wall-clock."""

    entropy_nats: float
    latency_ms: float
    tokens: int = 0
    source: str = "synthetic"  # "synthetic" | "measured"

    def __post_init__(self):
        if not (math.isfinite(self.entropy_nats) and self.entropy_nats >= 0):
            raise ValueError("entropy_nats must be finite and nonnegative")
        if not (math.isfinite(self.latency_ms) and self.latency_ms > 0):
            raise ValueError("latency_ms must be finite and positive")
        if self.source not in ("synthetic", "measured"):
            raise ValueError(f"unknown source {self.source!r}")


@dataclass(frozen=True)
class PowerLawFit:
    """latency = beta0 + beta1 * entropy^alpha."""

    beta0: float
    beta1: float
    alpha: float
    r_squared: float

    def predict(self, entropy_nats: float) -> float:
        return self.beta0 + self.beta1 * entropy_nats ** self.alpha


class UnfittableError(ValueError):
    """The sample set cannot identify a power-law fit."""


def synth_latency(tokens: int, c0: float, c1: float) -> float:
    """Deterministic per-call cost: c0 + c1 * tokens (milliseconds)."""
    if tokens < 0:
        raise ValueError("tokens must be nonnegative")
    if c0 < 0 or c1 < 0:
        raise ValueError("cost coefficients must be nonnegative")
    return c0 + c1 * tokens


def fit_power_law(
    samples: list[LatencySample],
    alpha_range: tuple[float, float] = DEFAULT_ALPHA_RANGE,
    alpha_grid: int = DEFAULT_ALPHA_GRID,
) -> PowerLawFit:
    """Grid search over alpha with linear least squares for (beta0, beta1).

    Picks the alpha with the smallest residual sum of squares, breaking ties
    toward smaller alpha (so flat data lands on the low end of the range).
    """
    lo, hi = alpha_range
    if not (0 < lo <= hi):
        raise ValueError("alpha_range must satisfy 0 < lo <= hi")
    if alpha_grid < 1:
        raise ValueError("alpha_grid must be >= 1")
    if len(samples) < 3:
        raise UnfittableError("need at least 3 samples")
    h = np.array([s.entropy_nats for s in samples])
    y = np.array([s.latency_ms for s in samples])
    if len(np.unique(h)) < 2:
        raise UnfittableError("need at least 2 distinct entropy values")

    alphas = np.linspace(lo, hi, alpha_grid)
    best = None
    for alpha in alphas:
        design = np.column_stack([np.ones_like(h), h ** alpha])
        coefs, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
        rss = float(np.sum((design @ coefs - y) ** 2))
        # strict < keeps the smallest alpha among ties
        if best is None or rss < best[0] - 1e-12 * (1.0 + best[0]):
            best = (rss, float(alpha), float(coefs[0]), float(coefs[1]))
    rss, alpha, beta0, beta1 = best
    tss = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if tss == 0.0 else 1.0 - rss / tss
    return PowerLawFit(beta0=beta0, beta1=beta1, alpha=alpha, r_squared=r_squared)


def hinge_penalties(
    latency_ms: float, tokens: int, budget: BudgetSpec
) -> tuple[float, float]:
    """(mu * [latency - B]_+, nu * [tokens - T]_+): zero iff under budget."""
    latency_penalty = budget.mu * max(0.0, latency_ms - budget.latency_cap_ms)
    token_penalty = budget.nu * max(0.0, float(tokens - budget.token_cap))
    return latency_penalty, token_penalty
