"""Mutual-information machinery.

Three layers:

* an exact plug-in oracle over discrete joint counts,
* variational lower bounds (Donsker-Varadhan / MINE and InfoNCE with
  in-batch negatives) evaluated through a small critic,
* hand-derived analytic gradients of both bounds for bilinear and
  one-hidden-layer tanh critics, plus plain gradient-ascent training.

Everything is numpy; gradients are written out explicitly so they can be
checked against central finite differences.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class MiObjective(enum.Enum):
    MINE = "mine"
    INFONCE = "infonce"


# ---------------------------------------------------------------------------
# Exact discrete oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointCounts:
    """Empirical joint counts over a |S| x |C| discrete pair."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 2:
            raise ValueError("counts must be a 2-D matrix")
        if np.any(arr < 0) or not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("counts must be nonnegative integers")
        if arr.sum() <= 0:
            raise ValueError("total count must be positive")
        object.__setattr__(self, "counts", arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape


def exact_mi(counts: JointCounts) -> float:
    """Plug-in mutual information of the empirical joint, in nats."""
    p = counts.counts / counts.total
    ps = p.sum(axis=1)
    pc = p.sum(axis=0)
    mi = 0.0
    rows, cols = np.nonzero(p)
    for i, j in zip(rows, cols):
        mi += p[i, j] * math.log(p[i, j] / (ps[i] * pc[j]))
    return max(0.0, mi)


def sample_joint(counts: JointCounts, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n (s, c) index pairs from the empirical joint."""
    p = (counts.counts / counts.total).ravel()
    flat = rng.choice(p.size, size=n, p=p)
    s_idx, c_idx = np.unravel_index(flat, counts.shape)
    return s_idx, c_idx


def onehot(indices: np.ndarray, dim: int) -> np.ndarray:
    """Row-wise one-hot encoding."""
    out = np.zeros((len(indices), dim))
    out[np.arange(len(indices)), indices] = 1.0
    return out


# ---------------------------------------------------------------------------
# Critics
# ---------------------------------------------------------------------------

@dataclass
class BilinearCritic:
    """f(s, c) = s^T W c."""

    w: np.ndarray  # (d_s, d_c)

    def copy(self) -> "BilinearCritic":
        return BilinearCritic(self.w.copy())

    def add_scaled(self, grad: "BilinearCritic", scale: float) -> None:
        self.w += scale * grad.w

    def flat(self) -> np.ndarray:
        return self.w.ravel().copy()

    @classmethod
    def zeros(cls, d_s: int, d_c: int) -> "BilinearCritic":
        return cls(np.zeros((d_s, d_c)))


@dataclass
class MlpCritic:
    """f(s, c) = w2^T tanh(W1 [s; c] + b1) + b2."""

    w1: np.ndarray  # (h, d_s + d_c)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: float

    def copy(self) -> "MlpCritic":
        return MlpCritic(self.w1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2))

    def add_scaled(self, grad: "MlpCritic", scale: float) -> None:
        self.w1 += scale * grad.w1
        self.b1 += scale * grad.b1
        self.w2 += scale * grad.w2
        self.b2 = float(self.b2 + scale * grad.b2)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def init(cls, d_s: int, d_c: int, hidden: int, rng: np.random.Generator) -> "MlpCritic":
        scale = 1.0 / math.sqrt(d_s + d_c)
        return cls(
            w1=rng.normal(0.0, scale, size=(hidden, d_s + d_c)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden),
            b2=0.0,
        )


CriticParameters = BilinearCritic | MlpCritic


def critic_eval(params: CriticParameters, s_embed: np.ndarray, c_embed: np.ndarray) -> float:
    """Critic score for a single (s, c) embedding pair."""
    s = np.asarray(s_embed, dtype=float)
    c = np.asarray(c_embed, dtype=float)
    if isinstance(params, BilinearCritic):
        if s.shape != (params.w.shape[0],) or c.shape != (params.w.shape[1],):
            raise ValueError("embedding dimensions do not match the critic")
        return float(s @ params.w @ c)
    u = np.concatenate([s, c])
    if u.shape != (params.w1.shape[1],):
        raise ValueError("embedding dimensions do not match the critic")
    return float(params.w2 @ np.tanh(params.w1 @ u + params.b1) + params.b2)


def _eval_matched(params: CriticParameters, s: np.ndarray, c: np.ndarray) -> np.ndarray:
    """f(s_i, c_i) for matched rows."""
    if isinstance(params, BilinearCritic):
        return np.einsum("ij,jk,ik->i", s, params.w, c)
    u = np.concatenate([s, c], axis=1)
    return np.tanh(u @ params.w1.T + params.b1) @ params.w2 + params.b2


def _eval_pairs(params: CriticParameters, s: np.ndarray, c: np.ndarray) -> np.ndarray:
    """f(s_i, c_j) score matrix for all row pairs."""
    if isinstance(params, BilinearCritic):
        return s @ params.w @ c.T
    n, m = len(s), len(c)
    u = np.concatenate(
        [np.repeat(s, m, axis=0), np.tile(c, (n, 1))], axis=1
    )
    f = np.tanh(u @ params.w1.T + params.b1) @ params.w2 + params.b2
    return f.reshape(n, m)


def _matched_weighted_grad(
    params: CriticParameters, s: np.ndarray, c: np.ndarray, weights: np.ndarray
) -> CriticParameters:
    """sum_i weights_i * d f(s_i, c_i) / d params."""
    if isinstance(params, BilinearCritic):
        return BilinearCritic((s * weights[:, None]).T @ c)
    u = np.concatenate([s, c], axis=1)
    a = np.tanh(u @ params.w1.T + params.b1)
    d = (1.0 - a * a) * params.w2[None, :] * weights[:, None]
    return MlpCritic(
        w1=d.T @ u,
        b1=d.sum(axis=0),
        w2=a.T @ weights,
        b2=float(weights.sum()),
    )


def _pairs_weighted_grad(
    params: CriticParameters, s: np.ndarray, c: np.ndarray, pair_weights: np.ndarray
) -> CriticParameters:
    """sum_ij pair_weights_ij * d f(s_i, c_j) / d params."""
    if isinstance(params, BilinearCritic):
        return BilinearCritic(s.T @ pair_weights @ c)
    n, m = len(s), len(c)
    u = np.concatenate(
        [np.repeat(s, m, axis=0), np.tile(c, (n, 1))], axis=1
    )
    return _matched_weighted_grad(
        MlpCritic(params.w1, params.b1, params.w2, params.b2),
        u[:, : s.shape[1]],
        u[:, s.shape[1]:],
        pair_weights.ravel(),
    )


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

def _logmeanexp(values: np.ndarray) -> float:
    m = float(np.max(values))
    return m + math.log(float(np.mean(np.exp(values - m))))


def mine_estimate(
    joint: tuple[np.ndarray, np.ndarray],
    marginal: tuple[np.ndarray, np.ndarray],
    params: CriticParameters,
) -> float:
    """Donsker-Varadhan bound: E_joint[f] - log E_marginal[e^f].

    The log term is computed with a max shift, so the estimate stays finite
    for critic outputs far outside the float range of exp.
    """
    s_j, c_j = joint
    s_m, c_m = marginal
    if len(s_j) == 0 or len(s_m) == 0:
        raise ValueError("batches must be non-empty")
    f_joint = _eval_matched(params, s_j, c_j)
    f_marg = _eval_matched(params, s_m, c_m)
    return float(np.mean(f_joint)) - _logmeanexp(f_marg)


def infonce_estimate(
    batch: tuple[np.ndarray, np.ndarray],
    params: CriticParameters,
    chunk: int = 1024,
) -> float:
    """InfoNCE bound with in-batch negatives (K = batch size - 1).

    Returns mean_i [f(s_i, c_i) - logsumexp_j f(s_i, c_j)] + log B, which is
    at most log B by construction.
    """
    s, c = batch
    b = len(s)
    if b < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    total = 0.0
    for start in range(0, b, chunk):
        rows_s = s[start:start + chunk]
        scores = _eval_pairs(params, rows_s, c)
        diag = _eval_matched(params, rows_s, c[start:start + chunk])
        m = scores.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
        total += float(np.sum(diag - lse))
    return total / b + math.log(b)


def mine_gradient(
    joint: tuple[np.ndarray, np.ndarray],
    marginal: tuple[np.ndarray, np.ndarray],
    params: CriticParameters,
) -> CriticParameters:
    """Analytic gradient of the DV bound w.r.t. the critic parameters.

    The marginal term contributes a softmax-weighted mean of per-sample
    gradients: E_q[e^f grad f] / E_q[e^f].
    """
    s_j, c_j = joint
    s_m, c_m = marginal
    n = len(s_j)
    f_marg = _eval_matched(params, s_m, c_m)
    shifted = np.exp(f_marg - np.max(f_marg))
    softmax = shifted / shifted.sum()
    g_joint = _matched_weighted_grad(params, s_j, c_j, np.full(n, 1.0 / n))
    g_marg = _matched_weighted_grad(params, s_m, c_m, softmax)
    g_joint.add_scaled(g_marg, -1.0)
    return g_joint


def infonce_gradient(
    batch: tuple[np.ndarray, np.ndarray], params: CriticParameters
) -> CriticParameters:
    """Analytic gradient of the InfoNCE bound w.r.t. the critic parameters."""
    s, c = batch
    b = len(s)
    scores = _eval_pairs(params, s, c)
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=1, keepdims=True)
    # d/dparams mean_i [f_ii - logsumexp_j f_ij]
    a = (np.eye(b) - p) / b
    return _pairs_weighted_grad(params, s, c, a)


def critic_gradient(
    objective: MiObjective,
    batches,
    params: CriticParameters,
) -> CriticParameters:
    """Dispatch to the analytic gradient of the chosen bound.

    ``batches`` is (joint, marginal) for MINE and a single matched batch
    for InfoNCE.
    """
    if objective is MiObjective.MINE:
        joint, marginal = batches
        return mine_gradient(joint, marginal, params)
    return infonce_gradient(batches, params)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

Sampler = Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]]


class CriticDivergence(RuntimeError):
    """Training produced a non-finite bound."""


def train_critic(
    objective: MiObjective,
    sampler: Sampler,
    params0: CriticParameters,
    steps: int,
    learning_rate: float,
    rng: np.random.Generator,
) -> tuple[CriticParameters, list[float]]:
    """Plain gradient ascent on the chosen bound.

    ``sampler(rng)`` returns a matched (S, C) embedding batch drawn from the
    joint; MINE marginal batches are formed by permuting C within the batch.
    Returns the final parameters and the per-step bound trajectory.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if learning_rate < 0:
        raise ValueError("learning_rate must be nonnegative")
    params = params0.copy()
    trajectory: list[float] = []
    for step in range(steps):
        s, c = sampler(rng)
        if objective is MiObjective.MINE:
            perm = rng.permutation(len(c))
            marginal = (s, c[perm])
            bound = mine_estimate((s, c), marginal, params)
            grad = mine_gradient((s, c), marginal, params)
        else:
            bound = infonce_estimate((s, c), params)
            grad = infonce_gradient((s, c), params)
        if not math.isfinite(bound):
            raise CriticDivergence(
                f"non-finite {objective.value} bound at step {step}: {bound}"
            )
        trajectory.append(bound)
        params.add_scaled(grad, learning_rate)
    return params, trajectory


def make_joint_sampler(counts: JointCounts, batch_size: int) -> Sampler:
    """Sampler of one-hot embedded batches from an empirical discrete joint."""
    d_s, d_c = counts.shape

    def sampler(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        s_idx, c_idx = sample_joint(counts, batch_size, rng)
        return onehot(s_idx, d_s), onehot(c_idx, d_c)

    return sampler
