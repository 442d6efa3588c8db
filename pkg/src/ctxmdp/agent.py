"""Policies over augmented states, update scheduling, and the execution loop.

Policy classes cover the tabular and linear specializations: Q-learning
(tabular keys or linear weights over bag-of-token features) and REINFORCE
softmax policies (tabular logits or linear weights). Every policy exposes
``action_probabilities`` so action distributions can be probed uniformly.

The ``Engine`` runs the pre-action loop: the summary used at step t is
always produced before the action at step t is sampled, the scheduler gates
when non-Keep summarizer work may happen, and a scheduled refresh always
happens (a Keep verdict from the meta-policy escalates to Refresh so the
budgeted update schedule is honored exactly).
"""

from __future__ import annotations

import math
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    AugmentedState,
    BudgetSignals,
    BudgetSpec,
    ContextSummary,
    EMPTY_SUMMARY,
    HistoryBuffer,
    MetaAction,
    UpdateMode,
    augment,
    embed_summary,
)
from .costmodel import LatencySample, synth_latency
from .envs import ContextualBandit, Environment
from .metrics import RegretTracker, plug_in_mi
from .summarize import (
    SummarizerSpec,
    SummaryWindow,
    summarize,
    summary_entropy,
    with_entropy,
)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _eps_greedy(q: np.ndarray, eps: float) -> np.ndarray:
    n = len(q)
    p = np.full(n, eps / n)
    p[int(np.argmax(q))] += 1.0 - eps
    return p


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass
class TabularQ:
    """Q-table keyed by the exact (state, summary tokens) pair."""

    num_actions: int
    learning_rate: float = 0.1
    discount: float = 0.95
    epsilon: float = 0.1
    epsilon_schedule: str = "constant"  # "constant" | "inv_sqrt"
    values: dict = field(default_factory=dict)
    steps_seen: int = 0

    def q(self, s: AugmentedState) -> np.ndarray:
        key = s.key()
        if key not in self.values:
            self.values[key] = np.zeros(self.num_actions)
        return self.values[key]

    def current_epsilon(self) -> float:
        if self.epsilon_schedule == "inv_sqrt":
            return min(1.0, self.epsilon / math.sqrt(1.0 + self.steps_seen))
        return self.epsilon

    def action_probabilities(self, s: AugmentedState) -> np.ndarray:
        return _eps_greedy(self.q(s), self.current_epsilon())

    def note_selection(self) -> None:
        self.steps_seen += 1

    def update_step(self, s, a, r, s_next, done) -> None:
        q_update(self, (s, a, r, s_next, done))

    def update_episode(self, trajectory) -> None:
        pass

    def greedy_actions(self, summary: ContextSummary, num_states: int) -> np.ndarray:
        return np.array(
            [int(np.argmax(self.q(augment(s, summary)))) for s in range(num_states)]
        )


@dataclass
class LinearQ:
    """Linear Q over one-hot(state) x [token counts; 1] features.

    Weights have shape (actions, states, ctx_dim + 1); the trailing feature
    is a bias, so an empty summary reduces to a per-state tabular Q. The TD
    step is normalized by the squared feature norm (LMS-style) so dense
    raw-context count features cannot destabilize the update.
    """

    num_actions: int
    num_states: int
    ctx_dim: int
    learning_rate: float = 0.05
    discount: float = 0.95
    epsilon: float = 0.1
    epsilon_schedule: str = "constant"
    weights: np.ndarray | None = None
    steps_seen: int = 0

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros((self.num_actions, self.num_states, self.ctx_dim + 1))

    def _features(self, summary: ContextSummary) -> np.ndarray:
        x = np.empty(self.ctx_dim + 1)
        x[: self.ctx_dim] = embed_summary(summary, self.ctx_dim)
        x[self.ctx_dim] = 1.0
        return x

    def q(self, s: AugmentedState) -> np.ndarray:
        return self.weights[:, s.state, :] @ self._features(s.summary)

    def current_epsilon(self) -> float:
        if self.epsilon_schedule == "inv_sqrt":
            return min(1.0, self.epsilon / math.sqrt(1.0 + self.steps_seen))
        return self.epsilon

    def action_probabilities(self, s: AugmentedState) -> np.ndarray:
        return _eps_greedy(self.q(s), self.current_epsilon())

    def note_selection(self) -> None:
        self.steps_seen += 1

    def update_step(self, s, a, r, s_next, done) -> None:
        x = self._features(s.summary)
        target = r if done else r + self.discount * float(np.max(self.q(s_next)))
        td = target - float(self.weights[a, s.state, :] @ x)
        self.weights[a, s.state, :] += self.learning_rate * td * x

    def update_episode(self, trajectory) -> None:
        pass

    def greedy_actions(self, summary: ContextSummary, num_states: int) -> np.ndarray:
        x = self._features(summary)
        q_all = self.weights @ x  # (actions, states)
        return q_all.argmax(axis=0)


@dataclass
class SoftmaxPolicy:
    """Tabular softmax policy with a per-augmented-state return baseline."""

    num_actions: int
    temperature: float = 1.0
    learning_rate: float = 0.1
    discount: float = 1.0
    logits: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    baseline_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def _logits(self, s: AugmentedState) -> np.ndarray:
        key = s.key()
        if key not in self.logits:
            self.logits[key] = np.zeros(self.num_actions)
        return self.logits[key]

    def action_probabilities(self, s: AugmentedState) -> np.ndarray:
        return _softmax(self._logits(s) / self.temperature)

    def update_step(self, s, a, r, s_next, done) -> None:
        pass

    def update_episode(self, trajectory) -> None:
        reinforce_update(self, trajectory)

    def greedy_actions(self, summary: ContextSummary, num_states: int) -> np.ndarray:
        return np.array(
            [int(np.argmax(self._logits(augment(s, summary)))) for s in range(num_states)]
        )


@dataclass
class LinearSoftmaxPolicy:
    """Softmax policy with linear logits over the LinearQ feature map.

    The return baseline is keyed by the base state: raw-context augmented
    keys rarely repeat, so a per-augmented-state mean would never engage.
    """

    num_actions: int
    num_states: int
    ctx_dim: int
    temperature: float = 1.0
    learning_rate: float = 0.1
    discount: float = 1.0
    weights: np.ndarray | None = None
    baseline: dict = field(default_factory=dict)
    baseline_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.weights is None:
            self.weights = np.zeros((self.num_actions, self.num_states, self.ctx_dim + 1))

    def _features(self, summary: ContextSummary) -> np.ndarray:
        x = np.empty(self.ctx_dim + 1)
        x[: self.ctx_dim] = embed_summary(summary, self.ctx_dim)
        x[self.ctx_dim] = 1.0
        return x

    def action_probabilities(self, s: AugmentedState) -> np.ndarray:
        logits = self.weights[:, s.state, :] @ self._features(s.summary)
        return _softmax(logits / self.temperature)

    def update_step(self, s, a, r, s_next, done) -> None:
        pass

    def update_episode(self, trajectory) -> None:
        if not trajectory:
            return
        returns = _discounted_returns([r for _, _, r in trajectory], self.discount)
        for (s, a, _), g in zip(trajectory, returns):
            b = self.baseline.get(s.state, 0.0)
            adv = g - b
            probs = self.action_probabilities(s)
            grad_logits = -probs / self.temperature
            grad_logits[a] += 1.0 / self.temperature
            x = self._features(s.summary)
            self.weights[:, s.state, :] += (
                self.learning_rate * adv * grad_logits[:, None] * x[None, :]
            )
            count = self.baseline_counts.get(s.state, 0) + 1
            self.baseline_counts[s.state] = count
            self.baseline[s.state] = b + (g - b) / count

    def greedy_actions(self, summary: ContextSummary, num_states: int) -> np.ndarray:
        q_all = self.weights @ self._features(summary)
        return q_all.argmax(axis=0)


Policy = TabularQ | LinearQ | SoftmaxPolicy | LinearSoftmaxPolicy


def select_action(policy: Policy, s: AugmentedState, rng: np.random.Generator) -> int:
    """Sample an action from the policy's distribution at an augmented state.

    Greedy choices inside epsilon-greedy distributions break ties toward the
    lowest action index, so exploration-free selection is deterministic.
    """
    p = policy.action_probabilities(s)
    action = int(rng.choice(len(p), p=p))
    note = getattr(policy, "note_selection", None)
    if note is not None:
        note()
    return action


def q_update(q: TabularQ, transition) -> TabularQ:
    """One tabular Q-learning backup: Q += lr * (target - Q)."""
    s, a, r, s_next, done = transition
    values = q.q(s)
    target = r if done else r + q.discount * float(np.max(q.q(s_next)))
    values[a] += q.learning_rate * (target - values[a])
    return q


def _discounted_returns(rewards: list[float], discount: float) -> list[float]:
    g = 0.0
    out = []
    for r in reversed(rewards):
        g = r + discount * g
        out.append(g)
    out.reverse()
    return out


def reinforce_update(policy: SoftmaxPolicy, trajectory) -> SoftmaxPolicy:
    """Monte-Carlo policy gradient with a running-mean return baseline.

    The advantage at each step uses the baseline as it stood before the
    step's return is folded into the running mean.
    """
    if not trajectory:
        return policy
    returns = _discounted_returns([r for _, _, r in trajectory], policy.discount)
    for (s, a, _), g in zip(trajectory, returns):
        key = s.key()
        b = policy.baseline.get(key, 0.0)
        adv = g - b
        probs = policy.action_probabilities(s)
        grad = -probs / policy.temperature
        grad[a] += 1.0 / policy.temperature
        policy._logits(s)[:] += policy.learning_rate * adv * grad
        count = policy.baseline_counts.get(key, 0) + 1
        policy.baseline_counts[key] = count
        policy.baseline[key] = b + (g - b) / count
    return policy


# ---------------------------------------------------------------------------
# Meta-policy and scheduler
# ---------------------------------------------------------------------------

@dataclass
class MetaPolicy:
    """Chooses Keep/Refresh/Compress from aggregated budget signals."""

    entropy_high: float = math.inf
    latency_high_ms: float = math.inf
    age_max: int = 8
    mode: str = "heuristic"  # "heuristic" | "epsilon_greedy"
    epsilon_meta: float = 0.1


def meta_select(meta: MetaPolicy, signals: BudgetSignals, rng: np.random.Generator) -> MetaAction:
    """Heuristic rule: compress under stress, refresh stale summaries, else keep."""
    if meta.mode == "epsilon_greedy" and rng.random() < meta.epsilon_meta:
        return rng.choice([MetaAction.KEEP, MetaAction.REFRESH, MetaAction.COMPRESS])
    if (
        signals.recent_latency_ms > meta.latency_high_ms
        or signals.entropy_nats > meta.entropy_high
    ):
        return MetaAction.COMPRESS
    if signals.summary_age >= meta.age_max:
        return MetaAction.REFRESH
    return MetaAction.KEEP


class UpdateScheduler:
    """Tracks when the budgeted update policy makes a refresh due."""

    def __init__(self, mode: UpdateMode):
        self.mode = mode
        self.last_refresh: int | None = None

    def decide(self, t: int) -> bool:
        if t < 0:
            raise ValueError("t must be nonnegative")
        if self.mode.kind == UpdateMode.PER_STEP:
            return True
        if self.mode.kind == UpdateMode.PERIODIC:
            return t % self.mode.param == 0
        if self.last_refresh is None:
            return True
        return t - self.last_refresh >= self.mode.param

    def record_refresh(self, t: int) -> None:
        self.last_refresh = t


def scheduler_decide(scheduler: UpdateScheduler, t: int) -> bool:
    """Whether a refresh is due at step t (does not record one)."""
    return scheduler.decide(t)


def predicted_refresh_steps(mode: UpdateMode, num_steps: int) -> set[int]:
    """The exact step set where a non-Keep refresh must run under a mode."""
    sched = UpdateScheduler(mode)
    out = set()
    for t in range(num_steps):
        if sched.decide(t):
            out.add(t)
            sched.record_refresh(t)
    return out


# ---------------------------------------------------------------------------
# Execution loop
# ---------------------------------------------------------------------------

@dataclass
class StepEvent:
    """One executed step; sequence stamps prove pre-action summary timing."""

    t: int
    episode: int
    state: int
    action: int
    reward: float
    done: bool
    mode: int
    summary_tokens: tuple
    token_count: int
    entropy_nats: float
    latency_ms_synth: float
    latency_ms_measured: float
    meta_action: str
    refresh_flag: bool
    regret_step: float
    regret_cum: float
    mi_window: float
    summary_seq: int
    action_seq: int


@dataclass
class EpisodeTrace:
    events: list
    total_reward: float
    reached_goal: bool
    aborted: bool = False
    error: str | None = None


class Engine:
    """Runs episodes under one baseline with persistent run-level state.

    ``context_source`` selects the baseline: "none" (empty summary, no
    summarizer cost), "raw" (the untruncated stream becomes the summary and
    pays the cost model on its full length), or "summarized" (the budgeted
    pipeline with scheduler and meta-policy).
    """

    def __init__(
        self,
        env: Environment,
        context_source: str,
        summarizer_spec: SummarizerSpec | None,
        policy: Policy,
        meta_policy: MetaPolicy,
        budget: BudgetSpec,
        run_seed: int,
        cost_c0: float = 1.0,
        cost_c1: float = 0.5,
        entropy_window: int = 256,
        history_capacity: int = 64,
        mi_window: int = 256,
        measure_wallclock: bool = False,
    ):
        if context_source not in ("none", "raw", "summarized"):
            raise ValueError(f"unknown context source {context_source!r}")
        self.env = env
        self.context_source = context_source
        self.spec = summarizer_spec
        self.policy = policy
        self.meta_policy = meta_policy
        self.budget = budget
        self.scheduler = UpdateScheduler(budget.update_mode)
        self.cost_c0 = cost_c0
        self.cost_c1 = cost_c1
        self.measure_wallclock = measure_wallclock
        self.run_seed = run_seed
        self.rng_action = np.random.default_rng([run_seed, 11])
        self.rng_meta = np.random.default_rng([run_seed, 13])

        self.t = 0
        self.prev_summary: ContextSummary | None = None
        self.window = SummaryWindow(entropy_window)
        self.history = HistoryBuffer(history_capacity)
        self.regret = RegretTracker()
        self.latency_ema = 0.0
        self._seq = 0
        self._pending: tuple | None = None

        self._mi_pairs: deque = deque(maxlen=mi_window)
        self._mi_counts: Counter = Counter()

        self.latency_samples: list[LatencySample] = []
        self.probe_states: dict = {}
        self.token_total = 0.0
        self.latency_total = 0.0
        self.measured_total = 0.0

    # -- helpers -----------------------------------------------------------

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _mode_evidence(self, summary: ContextSummary) -> tuple:
        m = self.env.num_modes
        return tuple(sorted({tok for tok in summary.tokens if 0 <= tok < m}))

    def _push_mi_pair(self, mode: int, summary: ContextSummary) -> float:
        pair = (mode, self._mode_evidence(summary))
        if len(self._mi_pairs) == self._mi_pairs.maxlen:
            old = self._mi_pairs[0]
            self._mi_counts[old] -= 1
            if self._mi_counts[old] == 0:
                del self._mi_counts[old]
        self._mi_pairs.append(pair)
        self._mi_counts[pair] += 1
        return plug_in_mi(self._mi_counts)

    def _compute_summary(self, signal, meta: MetaAction) -> tuple[ContextSummary, float]:
        """Returns the summary for this step and its synthetic latency."""
        if self.context_source == "none":
            return EMPTY_SUMMARY, 0.0
        if self.context_source == "raw":
            # identity summary over the full stream; budget checks disabled
            summary = ContextSummary(tokens=signal.tokens)
            return summary, synth_latency(summary.token_count, self.cost_c0, self.cost_c1)
        summary = summarize(
            self.spec, self.history, signal, self.budget, meta, previous=self.prev_summary
        )
        if meta is MetaAction.KEEP:
            return summary, 0.0
        return summary, synth_latency(summary.token_count, self.cost_c0, self.cost_c1)

    def _decide_meta(self, t: int) -> tuple[MetaAction, bool]:
        """(meta action, refresh due). A due refresh never stays Keep."""
        if self.context_source == "none":
            return MetaAction.KEEP, False
        if self.context_source == "raw":
            return MetaAction.REFRESH, True
        due = self.scheduler.decide(t)
        if not due:
            return MetaAction.KEEP, False
        if self.prev_summary is None:
            return MetaAction.REFRESH, True
        signals = BudgetSignals(
            entropy_nats=self.prev_summary.entropy_nats,
            token_count=self.prev_summary.token_count,
            recent_latency_ms=self.latency_ema,
            summary_age=self.prev_summary.age_steps,
        )
        meta = meta_select(self.meta_policy, signals, self.rng_meta)
        if meta is MetaAction.KEEP:
            meta = MetaAction.REFRESH
        return meta, True

    def _greedy_value(self, mode: int, state: int, summary: ContextSummary, action: int) -> float:
        if isinstance(self.env, ContextualBandit):
            return self.env.policy_value(mode, action)
        table = self.policy.greedy_actions(summary, self.env.num_states)
        return self.env.policy_value(mode, table, state)

    # -- main loop ---------------------------------------------------------

    def run_episode(self, episode: int, hooks: dict | None = None) -> EpisodeTrace:
        hooks = hooks or {}
        events = []
        total_reward = 0.0
        reached_goal = False
        trajectory = []
        try:
            obs = self.env.reset([self.run_seed, 1000 + episode])
            mode = self.env.current_mode
            while not obs.done:
                t = self.t
                wall_start = time.perf_counter() if self.measure_wallclock else 0.0

                meta, due = self._decide_meta(t)
                summary, latency = self._compute_summary(obs.raw_context, meta)
                refresh_flag = meta is not MetaAction.KEEP
                if self.context_source == "summarized" and refresh_flag:
                    self.scheduler.record_refresh(t)
                self.window.push(summary)
                summary = with_entropy(summary, summary_entropy(self.window))
                self.prev_summary = summary
                summary_seq = self._next_seq()
                self.latency_ema = 0.9 * self.latency_ema + 0.1 * latency
                if refresh_flag and self.context_source != "none":
                    self.latency_samples.append(
                        LatencySample(
                            entropy_nats=summary.entropy_nats,
                            latency_ms=max(latency, 1e-9),
                            tokens=summary.token_count,
                            source="synthetic",
                        )
                    )
                mi_value = self._push_mi_pair(mode, summary)
                self.token_total += summary.token_count
                self.latency_total += latency

                s_aug = augment(obs.state, summary)
                self.probe_states[s_aug.key()] = s_aug
                if len(self.probe_states) > 64:
                    self.probe_states.pop(next(iter(self.probe_states)))
                if "pre_action" in hooks:
                    hooks["pre_action"](s_aug)

                if self._pending is not None:
                    ps, pa, pr = self._pending
                    self.policy.update_step(ps, pa, pr, s_aug, False)
                    self._pending = None

                action = select_action(self.policy, s_aug, self.rng_action)
                action_seq = self._next_seq()

                obs_next = self.env.step(action)
                reward = obs_next.reward
                total_reward += reward
                self.history.push(obs.state, action, reward)
                trajectory.append((s_aug, action, reward))

                if obs_next.done:
                    self.policy.update_step(s_aug, action, reward, s_aug, True)
                else:
                    self._pending = (s_aug, action, reward)

                v_star = self.env.optimal_value(mode, obs.state)
                v_pi = self._greedy_value(mode, obs.state, summary, action)
                regret_step = self.regret.update(v_star, v_pi)

                wall_ms = (
                    (time.perf_counter() - wall_start) * 1000.0
                    if self.measure_wallclock
                    else 0.0
                )
                self.measured_total += wall_ms
                event = StepEvent(
                    t=t,
                    episode=episode,
                    state=obs.state,
                    action=action,
                    reward=reward,
                    done=obs_next.done,
                    mode=mode,
                    summary_tokens=summary.tokens,
                    token_count=summary.token_count,
                    entropy_nats=summary.entropy_nats,
                    latency_ms_synth=latency,
                    latency_ms_measured=wall_ms,
                    meta_action=meta.value,
                    refresh_flag=refresh_flag,
                    regret_step=regret_step,
                    regret_cum=self.regret.cumulative,
                    mi_window=mi_value,
                    summary_seq=summary_seq,
                    action_seq=action_seq,
                )
                events.append(event)
                if "post_step" in hooks:
                    hooks["post_step"](event)

                if obs_next.state == getattr(self.env.config, "goal", None) and reward > 0:
                    reached_goal = True
                obs = obs_next
                self.t += 1
        except Exception as exc:  # noqa: BLE001 - partial trace must be flagged
            return EpisodeTrace(
                events=events, total_reward=total_reward, reached_goal=reached_goal,
                aborted=True, error=f"{type(exc).__name__}: {exc}",
            )
        self.policy.update_episode(trajectory)
        return EpisodeTrace(
            events=events, total_reward=total_reward, reached_goal=reached_goal
        )


RunEpisodeHooks = dict[str, Callable]
