"""Core type and embedding tests."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxmdp.core import (
    AugmentedState,
    BudgetSpec,
    ContextSummary,
    EMPTY_SUMMARY,
    HistoryBuffer,
    UpdateMode,
    augment,
    embed_summary,
)


class TestAugment:
    def test_empty_context_case(self):
        s = augment(0, EMPTY_SUMMARY)
        assert s.summary.token_count == 0

    def test_constructor_identity(self):
        summary = ContextSummary(tokens=(2,))
        s = augment(3, summary)
        assert s == AugmentedState(state=3, summary=summary)

    def test_projection_round_trip(self):
        summary = ContextSummary(tokens=(1, 2))
        assert augment(7, summary).state == 7


class TestEmbedSummary:
    # vocab {a,b,c} -> tokens 0,1,2; summary [a,a,b]
    SUMMARY = ContextSummary(tokens=(0, 0, 1))

    def test_count_vector(self):
        np.testing.assert_array_equal(embed_summary(self.SUMMARY, 3), [2, 1, 0])

    def test_zero_padding(self):
        np.testing.assert_array_equal(embed_summary(self.SUMMARY, 5), [2, 1, 0, 0, 0])

    def test_truncation(self):
        np.testing.assert_array_equal(embed_summary(self.SUMMARY, 2), [2, 1])

    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            embed_summary(self.SUMMARY, 0)

    @given(
        tokens=st.lists(st.integers(min_value=0, max_value=15), max_size=24),
        dim=st.integers(min_value=1, max_value=20),
    )
    def test_permutation_invariant_bag(self, tokens, dim):
        base = embed_summary(ContextSummary(tokens=tuple(tokens)), dim)
        shuffled = embed_summary(ContextSummary(tokens=tuple(reversed(tokens))), dim)
        np.testing.assert_array_equal(base, shuffled)
        assert len(base) == dim
        assert np.all(np.isfinite(base))


class TestBudgetSpec:
    def test_compress_cap_rounds_up(self):
        assert BudgetSpec(token_cap=5, latency_cap_ms=10.0).compress_cap == 3
        assert BudgetSpec(token_cap=4, latency_cap_ms=10.0).compress_cap == 2
        assert BudgetSpec(token_cap=1, latency_cap_ms=10.0).compress_cap == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            BudgetSpec(token_cap=0, latency_cap_ms=10.0)
        with pytest.raises(ValueError):
            BudgetSpec(token_cap=1, latency_cap_ms=0.0)
        with pytest.raises(ValueError):
            BudgetSpec(token_cap=1, latency_cap_ms=1.0, lam=-0.1)

    def test_update_mode_validation(self):
        with pytest.raises(ValueError):
            UpdateMode("weekly")
        with pytest.raises(ValueError):
            UpdateMode.periodic(0)


class TestHistoryBuffer:
    def test_capacity_eviction(self):
        buf = HistoryBuffer(capacity=2)
        buf.push(0, 1, 0.5)
        buf.push(1, 0, 0.0)
        buf.push(2, 1, 1.0)
        assert len(buf) == 2
        assert buf.entries == [(1, 0, 0.0), (2, 1, 1.0)]


class TestContextSummary:
    def test_aged_increments(self):
        s = ContextSummary(tokens=(3,), entropy_nats=0.5, age_steps=1)
        aged = s.aged()
        assert aged.age_steps == 2 and aged.tokens == (3,)

    def test_invalid_fields(self):
        with pytest.raises(ValueError):
            ContextSummary(tokens=(), entropy_nats=-1.0)
        with pytest.raises(ValueError):
            ContextSummary(tokens=(), age_steps=-1)
