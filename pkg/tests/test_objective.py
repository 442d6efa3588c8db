"""Lagrangian, sufficiency KL, sensitivity, and joint-loss tests."""

import itertools
import math

import numpy as np
import pytest

from ctxmdp.core import BudgetSpec
from ctxmdp.objective import (
    LossWeights,
    ObjectiveComponents,
    joint_loss,
    lagrangian,
    sensitivity_excess,
    sensitivity_norms,
    sufficiency_epsilon,
    warmup_weight,
)

BUDGET = BudgetSpec(token_cap=64, latency_cap_ms=120.0, lam=0.01, mu=1.0, nu=1.0)


def components(**overrides):
    base = dict(
        mi_estimate=0.0, entropy_nats=0.0, latency_ms=0.0, tokens=0,
        epsilon_hat=0.0, sensitivity_q=0.0, sensitivity_pi=0.0,
    )
    base.update(overrides)
    return ObjectiveComponents(**base)


class TestLagrangian:
    def test_under_budget_arithmetic(self):
        comp = components(mi_estimate=0.5, entropy_nats=1.0, latency_ms=100.0, tokens=32)
        assert lagrangian(comp, BUDGET) == pytest.approx(-0.49)

    def test_all_zero(self):
        assert lagrangian(components(), BUDGET) == 0.0

    def test_token_hinge_only(self):
        budget = BudgetSpec(token_cap=64, latency_cap_ms=120.0, lam=0.0, mu=0.0, nu=1.0)
        comp = components(tokens=80)
        assert lagrangian(comp, budget) == 16.0

    def test_monotone_in_each_component(self):
        base = components(mi_estimate=0.3, entropy_nats=1.0, latency_ms=130.0, tokens=70)
        value = lagrangian(base, BUDGET)
        assert lagrangian(components(mi_estimate=0.4, entropy_nats=1.0, latency_ms=130.0, tokens=70), BUDGET) < value
        assert lagrangian(components(mi_estimate=0.3, entropy_nats=1.5, latency_ms=130.0, tokens=70), BUDGET) > value
        assert lagrangian(components(mi_estimate=0.3, entropy_nats=1.0, latency_ms=140.0, tokens=70), BUDGET) > value
        assert lagrangian(components(mi_estimate=0.3, entropy_nats=1.0, latency_ms=130.0, tokens=75), BUDGET) > value


class TestSufficiencyEpsilon:
    def test_identical_distributions_zero(self):
        p = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
        assert sufficiency_epsilon(p, p.copy()) == 0.0

    def test_hand_computed_kl(self):
        p = np.array([[0.9, 0.1]])
        q = np.array([[0.5, 0.5]])
        expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
        assert sufficiency_epsilon(p, q) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.3681, abs=1e-4)

    def test_matches_brute_force_on_probability_grid(self):
        # every 3-action distribution on a 0.1 grid with mass >= 0.1 per action
        grid = [
            (a / 10, b / 10, (10 - a - b) / 10)
            for a in range(1, 9)
            for b in range(1, 10 - a)
        ]
        for p_row, q_row in itertools.islice(itertools.product(grid, grid), 0, None, 7):
            p = np.array([p_row])
            q = np.array([q_row])
            oracle = sum(pi * math.log(pi / qi) for pi, qi in zip(p_row, q_row))
            assert sufficiency_epsilon(p, q) == pytest.approx(max(0.0, oracle), abs=1e-12)

    def test_state_weights(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        q = np.array([[1.0, 0.0], [0.25, 0.75]])
        kl_state1 = 0.5 * math.log(2.0) + 0.5 * math.log(0.5 / 0.75)
        assert sufficiency_epsilon(p, q, [0.0, 1.0]) == pytest.approx(kl_state1, abs=1e-7)
        assert sufficiency_epsilon(p, q, [1.0, 0.0]) == pytest.approx(0.0, abs=1e-7)

    def test_zero_probability_guarded_by_smoothing(self):
        p = np.array([[1.0, 0.0]])
        q = np.array([[0.0, 1.0]])
        value = sufficiency_epsilon(p, q)
        assert math.isfinite(value) and value > 1.0

    def test_negative_weights_rejected(self):
        p = np.array([[0.5, 0.5]])
        with pytest.raises(ValueError):
            sufficiency_epsilon(p, p, [-1.0])

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            sufficiency_epsilon(np.array([[0.5, 0.6]]), np.array([[0.5, 0.5]]))


class TestSensitivityNorms:
    def test_constant_functions_give_zero(self):
        q_norm, pi_norm = sensitivity_norms(
            lambda c: 1.5, lambda c: -0.25, np.zeros(4), probe_scale=1e-4
        )
        assert q_norm == 0.0 and pi_norm == 0.0

    def test_linear_map_recovers_weight_norm(self):
        w = np.array([1.0, -2.0, 0.5])
        q_norm, pi_norm = sensitivity_norms(
            lambda c: float(w @ c), lambda c: float(2.0 * w @ c),
            np.array([0.3, 0.1, -0.2]), probe_scale=1e-4,
        )
        assert q_norm == pytest.approx(np.linalg.norm(w), rel=1e-8)
        assert pi_norm == pytest.approx(2.0 * np.linalg.norm(w), rel=1e-8)

    def test_excess_hinge(self):
        assert sensitivity_excess(12.0, 10.0) == 2.0
        assert sensitivity_excess(7.0, 10.0) == 0.0

    def test_quadratic_error_is_second_order(self):
        f = lambda c: float(c[0] ** 3)
        coarse, _ = sensitivity_norms(f, f, np.array([1.0]), probe_scale=1e-2)
        fine, _ = sensitivity_norms(f, f, np.array([1.0]), probe_scale=1e-4)
        assert abs(fine - 3.0) < abs(coarse - 3.0)


class TestJointLoss:
    WEIGHTS = LossWeights()
    COMP = ObjectiveComponents(
        mi_estimate=0.4, entropy_nats=1.2, latency_ms=150.0, tokens=80,
        epsilon_hat=0.05, sensitivity_q=12.0, sensitivity_pi=4.0,
    )

    def test_progress_zero_is_rl_loss(self):
        assert joint_loss(3.25, self.COMP, self.WEIGHTS, 0.0, BUDGET) == 3.25

    def test_full_weight_after_warmup(self):
        at_warmup = joint_loss(1.0, self.COMP, self.WEIGHTS, 0.10, BUDGET)
        late = joint_loss(1.0, self.COMP, self.WEIGHTS, 0.9, BUDGET)
        assert at_warmup == late
        assert warmup_weight(0.10, 0.10) == 1.0

    def test_all_aux_zero_gives_rl_loss(self):
        comp = ObjectiveComponents(
            mi_estimate=0.0, entropy_nats=0.0, latency_ms=0.0, tokens=0,
        )
        for progress in (0.0, 0.05, 0.5, 1.0):
            assert joint_loss(2.0, comp, self.WEIGHTS, progress, BUDGET) == 2.0

    def test_warmup_continuity(self):
        eps = 1e-9
        before = joint_loss(0.0, self.COMP, self.WEIGHTS, 0.10 - eps, BUDGET)
        at = joint_loss(0.0, self.COMP, self.WEIGHTS, 0.10, BUDGET)
        assert before == pytest.approx(at, abs=1e-6)

    def test_hand_expanded_value(self):
        # eta1*(-I) + eta2*H + eta3*excess + eta4*hinges + eta5*eps, ramped
        w = self.WEIGHTS
        lat_pen = 1.0 * (150.0 - 120.0)
        tok_pen = 1.0 * (80 - 64)
        aux = (
            w.eta1 * -0.4 + w.eta2 * 1.2 + w.eta3 * (2.0 + 0.0)
            + w.eta4 * (lat_pen + tok_pen) + w.eta5 * 0.05
        )
        half_ramp = joint_loss(1.0, self.COMP, w, 0.05, BUDGET)
        assert half_ramp == pytest.approx(1.0 + 0.5 * aux, rel=1e-12)
