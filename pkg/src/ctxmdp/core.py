"""Shared domain types: summaries, augmented states, budgets, meta-actions.

Tokens are integers drawn from a finite per-environment vocabulary of size V.
By convention the first tokens of the vocabulary identify context modes and
the remaining indices form a disjoint distractor pool, so a summary's mode
content is always unambiguous.

All types here are immutable values and safe to share across workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

Token = int

# fixed-length bag-of-tokens count vector (see embed_summary)
SummaryEmbedding = np.ndarray


class MetaAction(enum.Enum):
    """Summary-maintenance decision taken alongside the environment action."""

    KEEP = "keep"
    REFRESH = "refresh"
    COMPRESS = "compress"


@dataclass(frozen=True)
class ContextSummary:
    """Budgeted token sequence distilled from history and exogenous signals.

    ``entropy_nats`` is the windowed entropy estimate attached when the
    summary was produced; ``age_steps`` counts steps since the last non-Keep
    refresh.
    """

    tokens: tuple[Token, ...]
    entropy_nats: float = 0.0
    age_steps: int = 0

    def __post_init__(self):
        if self.entropy_nats < 0:
            raise ValueError("entropy_nats must be nonnegative")
        if self.age_steps < 0:
            raise ValueError("age_steps must be nonnegative")

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    def aged(self) -> "ContextSummary":
        """Same content, one step older."""
        return ContextSummary(self.tokens, self.entropy_nats, self.age_steps + 1)


EMPTY_SUMMARY = ContextSummary(tokens=())


@dataclass(frozen=True)
class AugmentedState:
    """(base state, context summary) pair the policy conditions on."""

    state: int
    summary: ContextSummary

    def key(self) -> tuple[int, tuple[Token, ...]]:
        """Hashable identity used by tabular policies."""
        return (self.state, self.summary.tokens)


@dataclass(frozen=True)
class ExogenousSignal:
    """Raw per-step context token stream, before any summarization.

    Policies must never see this type directly; it reaches them only after
    passing through a summarizer (tests assert this).
    """

    tokens: tuple[Token, ...]


@dataclass
class HistoryBuffer:
    """Bounded FIFO of (state, action, reward) transitions."""

    capacity: int
    entries: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def push(self, state: int, action: int, reward: float) -> None:
        self.entries.append((state, action, reward))
        if len(self.entries) > self.capacity:
            del self.entries[0]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class UpdateMode:
    """When summaries refresh: every step, after a window, or periodically."""

    kind: str  # "per_step" | "sliding_window" | "periodic"
    param: int = 1

    PER_STEP = "per_step"
    SLIDING_WINDOW = "sliding_window"
    PERIODIC = "periodic"

    def __post_init__(self):
        if self.kind not in (self.PER_STEP, self.SLIDING_WINDOW, self.PERIODIC):
            raise ValueError(f"unknown update mode {self.kind!r}")
        if self.param < 1:
            raise ValueError("update mode parameter must be >= 1")

    @classmethod
    def per_step(cls) -> "UpdateMode":
        return cls(cls.PER_STEP)

    @classmethod
    def sliding_window(cls, window: int) -> "UpdateMode":
        return cls(cls.SLIDING_WINDOW, window)

    @classmethod
    def periodic(cls, interval: int) -> "UpdateMode":
        return cls(cls.PERIODIC, interval)


@dataclass(frozen=True)
class BudgetSpec:
    """Token/latency caps and the multipliers that price violations."""

    token_cap: int
    latency_cap_ms: float
    lam: float = 0.0
    mu: float = 0.0
    nu: float = 0.0
    update_mode: UpdateMode = field(default_factory=UpdateMode.per_step)

    def __post_init__(self):
        if self.token_cap < 1:
            raise ValueError("token_cap must be >= 1")
        if not self.latency_cap_ms > 0:
            raise ValueError("latency_cap_ms must be positive")
        for name in ("lam", "mu", "nu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def compress_cap(self) -> int:
        """Token cap in effect for a Compress refresh."""
        return math.ceil(self.token_cap / 2)


@dataclass(frozen=True)
class BudgetSignals:
    """Aggregated budget/complexity signals the meta-policy conditions on."""

    entropy_nats: float
    token_count: int
    recent_latency_ms: float
    summary_age: int

    def __post_init__(self):
        for name in ("entropy_nats", "recent_latency_ms"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.token_count < 0:
            raise ValueError("token_count must be nonnegative")


def augment(state: int, summary: ContextSummary) -> AugmentedState:
    """Pair a base state with its context summary."""
    return AugmentedState(state=state, summary=summary)


def embed_summary(summary: ContextSummary, dim: int) -> np.ndarray:
    """Bag-of-tokens count vector, zero-padded or truncated to ``dim``.

    Deterministic and order-insensitive: permuting the summary's tokens
    yields the same embedding.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim, dtype=float)
    for tok in summary.tokens:
        if 0 <= tok < dim:
            vec[tok] += 1.0
    return vec
