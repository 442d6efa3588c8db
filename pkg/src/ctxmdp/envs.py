"""Desk-scale contextual environments with exact optimal-value oracles.

Two environments share one token convention: vocabulary indices below the
mode count name context modes, the rest form a disjoint distractor pool.
Each observation carries a raw token stream holding the true mode token at
a seeded position among i.i.d. distractors, which realizes a controllably
noisy high-dimensional context.

* ``ContextualBandit``: single-state CMDP, Bernoulli arms whose means are
  modulated by the episode's context mode.
* ``ContextGridworld``: FrozenLake-style grid where the context mode sets
  the slip probability; intended moves fail onto one of the two
  perpendicular directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ContextSummary, ExogenousSignal, Token

VI_RESIDUAL = 1e-10

# FrozenLake action order
LEFT, DOWN, RIGHT, UP = 0, 1, 2, 3
_MOVES = {LEFT: (-1, 0), DOWN: (0, 1), RIGHT: (1, 0), UP: (0, -1)}


@dataclass(frozen=True)
class EnvObservation:
    state: int
    raw_context: ExogenousSignal
    reward: float
    done: bool


@dataclass(frozen=True)
class BanditConfig:
    """Contextual multi-armed bandit with Bernoulli rewards."""

    num_contexts: int
    num_arms: int
    mean_matrix: tuple[tuple[float, ...], ...]
    distractor_count: int = 0
    context_distribution: tuple[float, ...] | None = None
    distractor_vocab: int = 32

    def __post_init__(self):
        if self.num_contexts < 1 or self.num_arms < 1:
            raise ValueError("need at least one context and one arm")
        if len(self.mean_matrix) != self.num_contexts:
            raise ValueError("mean_matrix must have one row per context")
        for row in self.mean_matrix:
            if len(row) != self.num_arms:
                raise ValueError("mean_matrix rows must have one entry per arm")
            if any(not (0.0 <= v <= 1.0) for v in row):
                raise ValueError("mean_matrix entries must lie in [0, 1]")
        if self.distractor_count < 0 or self.distractor_vocab < 1:
            raise ValueError("distractor settings must be nonnegative / positive")
        dist = self.context_distribution
        if dist is not None:
            if len(dist) != self.num_contexts or any(p < 0 for p in dist):
                raise ValueError("context_distribution must be nonnegative per context")
            if abs(sum(dist) - 1.0) > 1e-9:
                raise ValueError("context_distribution must sum to 1 within 1e-9")

    @property
    def prior(self) -> np.ndarray:
        if self.context_distribution is None:
            return np.full(self.num_contexts, 1.0 / self.num_contexts)
        return np.array(self.context_distribution)


@dataclass(frozen=True)
class GridworldConfig:
    """Context-modulated grid: each mode sets its own slip probability."""

    width: int
    height: int
    goal: int
    holes: tuple[int, ...]
    context_modes: tuple[tuple[str, float], ...]
    horizon: int = 100
    distractor_count: int = 0
    discount: float = 0.95
    mode_distribution: tuple[float, ...] | None = None
    distractor_vocab: int = 32
    start: int = 0

    def __post_init__(self):
        n = self.width * self.height
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        if not (0 <= self.goal < n) or not (0 <= self.start < n):
            raise ValueError("goal/start must be valid cells")
        if self.goal in self.holes:
            raise ValueError("goal must not be a hole")
        if any(not (0 <= h < n) for h in self.holes):
            raise ValueError("holes must be valid cells")
        if not self.context_modes:
            raise ValueError("need at least one context mode")
        for name, slip in self.context_modes:
            if not (0.0 <= slip <= 1.0):
                raise ValueError(f"slip probability for mode {name!r} must be in [0,1]")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError("discount must lie in [0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        dist = self.mode_distribution
        if dist is not None:
            if len(dist) != len(self.context_modes) or any(p < 0 for p in dist):
                raise ValueError("mode_distribution must be nonnegative per mode")
            if abs(sum(dist) - 1.0) > 1e-9:
                raise ValueError("mode_distribution must sum to 1 within 1e-9")

    @property
    def prior(self) -> np.ndarray:
        m = len(self.context_modes)
        if self.mode_distribution is None:
            return np.full(m, 1.0 / m)
        return np.array(self.mode_distribution)


def _raw_context(
    mode_token: Token, distractor_count: int, mode_count: int,
    distractor_vocab: int, rng: np.random.Generator,
) -> ExogenousSignal:
    """True mode token at a seeded position among i.i.d. distractors."""
    distractors = rng.integers(
        mode_count, mode_count + distractor_vocab, size=distractor_count
    )
    pos = int(rng.integers(0, distractor_count + 1))
    tokens = list(map(int, distractors))
    tokens.insert(pos, int(mode_token))
    return ExogenousSignal(tokens=tuple(tokens))


def _mode_posterior(prior: np.ndarray, mode_count: int, tokens: tuple[Token, ...]) -> np.ndarray:
    """Posterior over modes implied by the mode tokens present in a summary.

    No mode token -> the prior; otherwise the prior restricted to the modes
    named in the summary (the distractor pool is disjoint, so any mode token
    present is evidence).
    """
    present = sorted({t for t in tokens if 0 <= t < mode_count})
    if not present:
        return prior.copy()
    post = np.zeros(mode_count)
    post[present] = prior[present]
    if post.sum() <= 0:
        post[present] = 1.0
    return post / post.sum()


def _softmax(q: np.ndarray, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("temperature must be positive")
    z = q / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


class ContextualBandit:
    """Single-step episodes; the mode picks which arm means are live."""

    def __init__(self, config: BanditConfig):
        self.config = config
        self.means = np.array(config.mean_matrix)
        self.num_states = 1
        self.num_actions = config.num_arms
        self.num_modes = config.num_contexts
        self.vocab_size = config.num_contexts + config.distractor_vocab
        self._rng: np.random.Generator | None = None
        self.current_mode: int | None = None
        self._done = True

    def reset(self, seed) -> EnvObservation:
        self._rng = np.random.default_rng(seed)
        self.current_mode = int(self._rng.choice(self.num_modes, p=self.config.prior))
        self._done = False
        raw = _raw_context(
            self.current_mode, self.config.distractor_count,
            self.num_modes, self.config.distractor_vocab, self._rng,
        )
        return EnvObservation(state=0, raw_context=raw, reward=0.0, done=False)

    def step(self, action: int) -> EnvObservation:
        if self._done:
            raise RuntimeError("cannot step a finished episode")
        if not (0 <= action < self.num_actions):
            raise ValueError(f"invalid arm {action}")
        p = self.means[self.current_mode, action]
        reward = 1.0 if self._rng.random() < p else 0.0
        self._done = True
        return EnvObservation(
            state=0, raw_context=ExogenousSignal(tokens=()), reward=reward, done=True
        )

    def q_values(self, mode: int) -> np.ndarray:
        """(num_states, num_actions) exact action values under a mode."""
        return self.means[mode][None, :].copy()

    def optimal_value(self, mode: int, state: int = 0) -> float:
        return float(self.means[mode].max())

    def policy_value(self, mode: int, action: int, state: int = 0) -> float:
        """Value of playing an arm under the true mode (its mean)."""
        return float(self.means[mode, action])

    def mode_posterior(self, summary: ContextSummary) -> np.ndarray:
        return _mode_posterior(self.config.prior, self.num_modes, summary.tokens)

    def relevance_scores(self) -> dict[Token, float]:
        return {m: 1.0 for m in range(self.num_modes)}


class ContextGridworld:
    """FrozenLake analog; the mode's slip probability modulates all moves."""

    def __init__(self, config: GridworldConfig):
        self.config = config
        self.num_states = config.width * config.height
        self.num_actions = 4
        self.num_modes = len(config.context_modes)
        self.vocab_size = self.num_modes + config.distractor_vocab
        self.terminal = set(config.holes) | {config.goal}
        self._kernels: dict[int, np.ndarray] = {}
        self._q_cache: dict[int, np.ndarray] = {}
        self._eval_cache: dict[tuple[int, tuple[int, ...]], np.ndarray] = {}
        self._rng: np.random.Generator | None = None
        self.current_mode: int | None = None
        self._state = config.start
        self._steps = 0
        self._done = True

    # -- dynamics ----------------------------------------------------------

    def _move(self, state: int, action: int) -> int:
        w = self.config.width
        x, y = state % w, state // w
        dx, dy = _MOVES[action]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < w and 0 <= ny < self.config.height):
            return state
        return ny * w + nx

    def _kernel(self, mode: int) -> np.ndarray:
        """P[s, a, s'] under a mode; terminal states absorb."""
        if mode not in self._kernels:
            slip = self.config.context_modes[mode][1]
            p = np.zeros((self.num_states, self.num_actions, self.num_states))
            for s in range(self.num_states):
                if s in self.terminal:
                    p[s, :, s] = 1.0
                    continue
                for a in range(self.num_actions):
                    p[s, a, self._move(s, a)] += 1.0 - slip
                    for perp in ((a + 1) % 4, (a + 3) % 4):
                        p[s, a, self._move(s, perp)] += slip / 2.0
            self._kernels[mode] = p
        return self._kernels[mode]

    def reset(self, seed) -> EnvObservation:
        self._rng = np.random.default_rng(seed)
        self.current_mode = int(self._rng.choice(self.num_modes, p=self.config.prior))
        self._state = self.config.start
        self._steps = 0
        self._done = False
        return EnvObservation(
            state=self._state, raw_context=self._observe_context(),
            reward=0.0, done=False,
        )

    def _observe_context(self) -> ExogenousSignal:
        return _raw_context(
            self.current_mode, self.config.distractor_count,
            self.num_modes, self.config.distractor_vocab, self._rng,
        )

    def step(self, action: int) -> EnvObservation:
        if self._done:
            raise RuntimeError("cannot step a finished episode")
        if not (0 <= action < self.num_actions):
            raise ValueError(f"invalid action {action}")
        slip = self.config.context_modes[self.current_mode][1]
        r = self._rng.random()
        if r < 1.0 - slip:
            chosen = action
        elif r < 1.0 - slip / 2.0:
            chosen = (action + 1) % 4
        else:
            chosen = (action + 3) % 4
        self._state = self._move(self._state, chosen)
        self._steps += 1
        reward = 1.0 if self._state == self.config.goal else 0.0
        self._done = (
            self._state in self.terminal or self._steps >= self.config.horizon
        )
        return EnvObservation(
            state=self._state, raw_context=self._observe_context(),
            reward=reward, done=self._done,
        )

    # -- oracles -----------------------------------------------------------

    def _reward_vector(self) -> np.ndarray:
        r = np.zeros(self.num_states)
        r[self.config.goal] = 1.0
        return r

    def q_values(self, mode: int) -> np.ndarray:
        """Exact Q from value iteration to residual < 1e-10."""
        if mode not in self._q_cache:
            p = self._kernel(mode)
            gamma = self.config.discount
            enter = self._reward_vector()
            v = np.zeros(self.num_states)
            while True:
                q = np.einsum("sat,t->sa", p, enter + gamma * v)
                for t in self.terminal:
                    q[t, :] = 0.0
                v_new = q.max(axis=1)
                if np.max(np.abs(v_new - v)) < VI_RESIDUAL:
                    break
                v = v_new
            self._q_cache[mode] = q
        return self._q_cache[mode]

    def optimal_value(self, mode: int, state: int) -> float:
        if state in self.terminal:
            return 0.0
        return float(self.q_values(mode)[state].max())

    def policy_value(self, mode: int, policy_actions: np.ndarray, state: int) -> float:
        """Exact value of a deterministic policy under the true mode.

        Solved as a linear system, so the residual is at machine precision.
        """
        key = (mode, tuple(int(a) for a in policy_actions))
        if key not in self._eval_cache:
            p = self._kernel(mode)
            gamma = self.config.discount
            enter = self._reward_vector()
            p_pi = p[np.arange(self.num_states), policy_actions, :]
            r_pi = p_pi @ enter
            for t in self.terminal:
                r_pi[t] = 0.0
                p_pi[t, :] = 0.0
            v = np.linalg.solve(np.eye(self.num_states) - gamma * p_pi, r_pi)
            self._eval_cache[key] = v
        return float(self._eval_cache[key][state])

    def mode_posterior(self, summary: ContextSummary) -> np.ndarray:
        return _mode_posterior(self.config.prior, self.num_modes, summary.tokens)

    def relevance_scores(self) -> dict[Token, float]:
        return {m: 1.0 for m in range(self.num_modes)}


Environment = ContextualBandit | ContextGridworld


def optimal_softmax_policy(env: Environment, mode: int, tau: float) -> np.ndarray:
    """Softmax over exact Q-values under full knowledge of the mode.

    Returns a (num_states, num_actions) matrix of action distributions.
    """
    q = env.q_values(mode)
    return np.vstack([_softmax(q[s], tau) for s in range(q.shape[0])])


def posterior_softmax_policy(
    env: Environment, posterior: np.ndarray, tau: float
) -> np.ndarray:
    """Softmax over posterior-averaged Q-values (summary conditioning).

    With a point-mass posterior this equals ``optimal_softmax_policy`` for
    that mode exactly.
    """
    posterior = np.asarray(posterior, dtype=float)
    if posterior.shape != (env.num_modes,):
        raise ValueError("posterior must have one entry per mode")
    if abs(posterior.sum() - 1.0) > 1e-9 or np.any(posterior < 0):
        raise ValueError("posterior must be a distribution")
    q_bar = sum(
        posterior[m] * env.q_values(m) for m in range(env.num_modes)
    )
    return np.vstack([_softmax(q_bar[s], tau) for s in range(q_bar.shape[0])])


def summary_softmax_policy(
    env: Environment, summary: ContextSummary, tau: float
) -> np.ndarray:
    """Softmax policy conditioned on a summary via its implied mode posterior."""
    return posterior_softmax_policy(env, env.mode_posterior(summary), tau)
