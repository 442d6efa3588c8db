"""Policy, scheduler, meta-policy, and execution-loop tests."""

import math

import numpy as np
import pytest

from ctxmdp.agent import (
    Engine,
    LinearQ,
    LinearSoftmaxPolicy,
    MetaPolicy,
    SoftmaxPolicy,
    TabularQ,
    UpdateScheduler,
    meta_select,
    predicted_refresh_steps,
    q_update,
    reinforce_update,
    scheduler_decide,
    select_action,
)
from ctxmdp.core import (
    BudgetSignals,
    BudgetSpec,
    ContextSummary,
    EMPTY_SUMMARY,
    ExogenousSignal,
    MetaAction,
    UpdateMode,
    augment,
)
from ctxmdp.envs import BanditConfig, ContextGridworld, ContextualBandit, GridworldConfig
from ctxmdp.summarize import RelevanceExtract, Truncate

S0 = augment(0, EMPTY_SUMMARY)
S1 = augment(1, EMPTY_SUMMARY)


def make_tabular(q_values, epsilon=0.0, **kwargs):
    policy = TabularQ(num_actions=len(q_values), epsilon=epsilon, **kwargs)
    policy.q(S0)[:] = q_values
    return policy


class TestSelectAction:
    def test_greedy_picks_best(self):
        policy = make_tabular([1.0, 0.2])
        rng = np.random.default_rng(0)
        assert all(select_action(policy, S0, rng) == 0 for _ in range(50))

    def test_tie_breaks_lowest_index(self):
        policy = make_tabular([0.5, 0.5, 0.5])
        rng = np.random.default_rng(0)
        assert all(select_action(policy, S0, rng) == 0 for _ in range(50))

    def test_full_exploration_uniform(self):
        policy = make_tabular([1.0, 0.0, 0.0, 0.0], epsilon=1.0)
        rng = np.random.default_rng(1)
        n = 10_000
        counts = np.bincount(
            [select_action(policy, S0, rng) for _ in range(n)], minlength=4
        )
        sigma = math.sqrt(n * 0.25 * 0.75)
        assert np.all(np.abs(counts - n / 4) <= 3 * sigma)

    def test_inv_sqrt_schedule_decays(self):
        policy = make_tabular([0.0, 0.0], epsilon=4.0)
        policy.epsilon_schedule = "inv_sqrt"
        assert policy.current_epsilon() == 1.0
        policy.steps_seen = 10_000
        assert policy.current_epsilon() == pytest.approx(0.04, rel=1e-2)


class TestQUpdate:
    def test_terminal_one_step_arithmetic(self):
        policy = TabularQ(num_actions=2, learning_rate=0.5)
        q_update(policy, (S0, 0, 1.0, S0, True))
        assert policy.q(S0)[0] == 0.5

    def test_zero_learning_rate(self):
        policy = make_tabular([0.3, 0.7], learning_rate=0.0)
        q_update(policy, (S0, 1, 1.0, S1, False))
        assert list(policy.q(S0)) == [0.3, 0.7]

    def test_two_state_chain_converges_to_closed_form(self):
        # s0 -> s1 (reward 0), s1 -> terminal (reward 1): Q*(s1)=1, Q*(s0)=gamma
        gamma = 0.9
        policy = TabularQ(num_actions=1, learning_rate=0.25, discount=gamma)
        for _ in range(10_000):
            q_update(policy, (S0, 0, 0.0, S1, False))
            q_update(policy, (S1, 0, 1.0, S1, True))
        assert policy.q(S1)[0] == pytest.approx(1.0, abs=1e-6)
        assert policy.q(S0)[0] == pytest.approx(gamma, abs=1e-6)

    def test_bellman_consistency_at_convergence(self):
        gamma = 0.8
        policy = TabularQ(num_actions=1, learning_rate=0.5, discount=gamma)
        transitions = [(S0, 0, 0.0, S1, False), (S1, 0, 1.0, S1, True)]
        for _ in range(5_000):
            for tr in transitions:
                q_update(policy, tr)
        for s, a, r, s_next, done in transitions:
            target = r if done else r + gamma * float(np.max(policy.q(s_next)))
            assert abs(policy.q(s)[a] - target) <= 1e-6


class TestReinforceUpdate:
    def test_zero_advantage_leaves_logits(self):
        policy = SoftmaxPolicy(num_actions=2, learning_rate=0.5)
        policy.baseline[S0.key()] = 1.0
        policy.baseline_counts[S0.key()] = 1
        reinforce_update(policy, [(S0, 0, 1.0)])
        assert list(policy._logits(S0)) == [0.0, 0.0]

    def test_bandit_probability_of_good_arm_increases(self):
        rng = np.random.default_rng(5)
        policy = SoftmaxPolicy(num_actions=2, learning_rate=0.3)
        prev = policy.action_probabilities(S0)[0]
        for _ in range(60):
            action = select_action(policy, S0, rng)
            reward = 1.0 if action == 0 else 0.0
            key = S0.key()
            baseline_before = policy.baseline.get(key, 0.0)
            advantage = reward - baseline_before
            reinforce_update(policy, [(S0, action, reward)])
            current = policy.action_probabilities(S0)[0]
            if advantage != 0.0:
                assert current > prev
            else:
                assert current == pytest.approx(prev, abs=1e-12)
            prev = current
        assert policy.action_probabilities(S0)[0] > 0.8

    def test_log_softmax_gradient_sums_to_zero(self):
        policy = SoftmaxPolicy(num_actions=3, learning_rate=0.2)
        reinforce_update(policy, [(S0, 1, 1.0)])
        # sum_a grad log pi(a) = 0 implies the logit shift sums to zero
        assert float(np.sum(policy._logits(S0))) == pytest.approx(0.0, abs=1e-12)

    def test_baseline_running_mean(self):
        policy = SoftmaxPolicy(num_actions=2, learning_rate=0.1)
        for g in (1.0, 0.0, 1.0, 1.0):
            reinforce_update(policy, [(S0, 0, g)])
        assert policy.baseline[S0.key()] == pytest.approx(0.75)

    def test_linear_softmax_matches_sign_behavior(self):
        policy = LinearSoftmaxPolicy(num_actions=2, num_states=1, ctx_dim=3, learning_rate=0.5)
        s = augment(0, ContextSummary(tokens=(1,)))
        before = policy.action_probabilities(s)[0]
        policy.update_episode([(s, 0, 1.0)])
        assert policy.action_probabilities(s)[0] > before


class TestScheduler:
    def test_periodic_eight(self):
        sched = UpdateScheduler(UpdateMode.periodic(8))
        due = [t for t in range(25) if scheduler_decide(sched, t)]
        assert due == [0, 8, 16, 24]

    def test_per_step_every_time(self):
        sched = UpdateScheduler(UpdateMode.per_step())
        assert all(scheduler_decide(sched, t) for t in range(20))

    def test_sliding_window_sixteen(self):
        sched = UpdateScheduler(UpdateMode.sliding_window(16))
        assert sched.decide(5)
        sched.record_refresh(5)
        assert not any(sched.decide(t) for t in range(6, 21))
        assert sched.decide(21)

    def test_predicted_refresh_steps(self):
        assert predicted_refresh_steps(UpdateMode.periodic(8), 20) == {0, 8, 16}
        assert predicted_refresh_steps(UpdateMode.sliding_window(4), 10) == {0, 4, 8}
        assert predicted_refresh_steps(UpdateMode.per_step(), 4) == {0, 1, 2, 3}


class TestMetaSelect:
    META = MetaPolicy(entropy_high=2.0, latency_high_ms=120.0, age_max=8)

    def _signals(self, entropy=0.1, latency=10.0, age=0):
        return BudgetSignals(
            entropy_nats=entropy, token_count=4,
            recent_latency_ms=latency, summary_age=age,
        )

    def test_nominal_keeps(self):
        rng = np.random.default_rng(0)
        assert meta_select(self.META, self._signals(), rng) is MetaAction.KEEP

    def test_high_latency_compresses(self):
        rng = np.random.default_rng(0)
        assert meta_select(self.META, self._signals(latency=200.0), rng) is MetaAction.COMPRESS

    def test_high_entropy_compresses(self):
        rng = np.random.default_rng(0)
        assert meta_select(self.META, self._signals(entropy=3.0), rng) is MetaAction.COMPRESS

    def test_stale_refreshes(self):
        rng = np.random.default_rng(0)
        assert meta_select(self.META, self._signals(age=10), rng) is MetaAction.REFRESH


# ---------------------------------------------------------------------------
# Execution loop
# ---------------------------------------------------------------------------

BANDIT = BanditConfig(
    num_contexts=2, num_arms=2,
    mean_matrix=((0.9, 0.1), (0.1, 0.9)), distractor_count=6,
)

GRID = GridworldConfig(
    width=4, height=4, goal=15, holes=(5, 7),
    context_modes=(("dry", 0.0), ("icy", 0.4)), horizon=40, distractor_count=4,
)


def bandit_engine(update_mode=None, source="summarized", seed=0, **engine_kwargs):
    env = ContextualBandit(BANDIT)
    budget = BudgetSpec(
        token_cap=2, latency_cap_ms=100.0,
        update_mode=update_mode or UpdateMode.per_step(),
    )
    policy = LinearQ(
        num_actions=env.num_actions, num_states=1, ctx_dim=env.vocab_size,
        epsilon=0.2, learning_rate=0.2,
    )
    spec = RelevanceExtract.from_dict(env.relevance_scores()) if source == "summarized" else None
    return Engine(
        env=env, context_source=source, summarizer_spec=spec,
        policy=policy, meta_policy=MetaPolicy(), budget=budget, run_seed=seed,
        **engine_kwargs,
    )


class TestEngine:
    def test_one_step_bandit_orders_summary_before_action(self):
        engine = bandit_engine()
        trace = engine.run_episode(0)
        assert len(trace.events) == 1
        event = trace.events[0]
        assert event.summary_seq < event.action_seq

    def test_per_step_refresh_keeps_age_zero(self):
        engine = bandit_engine()
        ages = []
        for episode in range(30):
            engine.run_episode(
                episode, hooks={"pre_action": lambda s: ages.append(s.summary.age_steps)}
            )
        assert ages and all(a == 0 for a in ages)

    def test_identical_seeds_identical_traces(self):
        a = [e for ep in range(20) for e in bandit_engine(seed=3).run_episode(ep).events]
        # rebuild and rerun with the same seed
        engine = bandit_engine(seed=3)
        b = [e for ep in range(20) for e in engine.run_episode(ep).events]
        engine2 = bandit_engine(seed=3)
        c = [e for ep in range(20) for e in engine2.run_episode(ep).events]
        assert b == c

    def test_refresh_set_matches_schedule(self):
        for mode in (UpdateMode.per_step(), UpdateMode.periodic(8), UpdateMode.sliding_window(16)):
            engine = bandit_engine(update_mode=mode)
            events = [e for ep in range(50) for e in engine.run_episode(ep).events]
            actual = {e.t for e in events if e.meta_action != "keep"}
            assert actual == predicted_refresh_steps(mode, len(events)), mode

    def test_budget_safety_on_summarized_steps(self):
        engine = bandit_engine(update_mode=UpdateMode.periodic(4))
        events = [e for ep in range(60) for e in engine.run_episode(ep).events]
        assert all(e.token_count <= 2 for e in events)

    def test_policies_never_see_raw_signal(self):
        seen = []
        engine = bandit_engine()
        for episode in range(10):
            engine.run_episode(episode, hooks={"pre_action": seen.append})
        for s in seen:
            assert not isinstance(s.summary, ExogenousSignal)
            assert all(isinstance(tok, int) for tok in s.summary.tokens)
            # summarized tokens stay within budget, raw stream would not
            assert s.summary.token_count <= 2

    def test_raw_source_pays_full_length_cost(self):
        engine = bandit_engine(source="raw")
        trace = engine.run_episode(0)
        event = trace.events[0]
        assert event.token_count == 7  # mode token + 6 distractors
        assert event.latency_ms_synth == pytest.approx(1.0 + 0.5 * 7)

    def test_none_source_has_no_cost_or_tokens(self):
        engine = bandit_engine(source="none")
        events = [e for ep in range(5) for e in engine.run_episode(ep).events]
        assert all(e.token_count == 0 and e.latency_ms_synth == 0.0 for e in events)

    def test_keep_steps_cost_nothing(self):
        engine = bandit_engine(update_mode=UpdateMode.periodic(4))
        events = [e for ep in range(20) for e in engine.run_episode(ep).events]
        keeps = [e for e in events if e.meta_action == "keep"]
        assert keeps and all(e.latency_ms_synth == 0.0 for e in keeps)

    def test_aborted_episode_flagged_with_partial_trace(self):
        engine = bandit_engine()

        def boom(event):
            raise RuntimeError("injected failure")

        trace = engine.run_episode(0, hooks={"post_step": boom})
        assert trace.aborted
        assert "injected failure" in trace.error
        assert len(trace.events) == 1

    def test_gridworld_run_accumulates_regret(self):
        env = ContextGridworld(GRID)
        policy = LinearQ(
            num_actions=4, num_states=env.num_states, ctx_dim=env.vocab_size,
            epsilon=0.3, learning_rate=0.1, discount=GRID.discount,
        )
        engine = Engine(
            env=env, context_source="summarized",
            summarizer_spec=RelevanceExtract.from_dict(env.relevance_scores()),
            policy=policy, meta_policy=MetaPolicy(),
            budget=BudgetSpec(token_cap=2, latency_cap_ms=100.0), run_seed=0,
        )
        traces = [engine.run_episode(ep) for ep in range(30)]
        events = [e for tr in traces for e in tr.events]
        assert engine.regret.cumulative > 0
        assert all(
            b.regret_cum >= a.regret_cum for a, b in zip(events, events[1:])
        )
        assert any(tr.reached_goal for tr in traces) or engine.regret.cumulative > 0

    def test_sequence_stamps_monotone(self):
        engine = bandit_engine()
        events = [e for ep in range(10) for e in engine.run_episode(ep).events]
        seqs = [x for e in events for x in (e.summary_seq, e.action_seq)]
        assert seqs == sorted(seqs)


class TestGreedyActions:
    def test_linear_q_greedy_table(self):
        policy = LinearQ(num_actions=2, num_states=3, ctx_dim=2)
        policy.weights[1, 2, 2] = 1.0  # bias weight favors action 1 at state 2
        table = policy.greedy_actions(EMPTY_SUMMARY, 3)
        assert list(table) == [0, 0, 1]

    def test_tabular_greedy_table(self):
        policy = TabularQ(num_actions=2)
        policy.q(augment(1, EMPTY_SUMMARY))[:] = [0.1, 0.9]
        table = policy.greedy_actions(EMPTY_SUMMARY, 2)
        assert list(table) == [0, 1]
