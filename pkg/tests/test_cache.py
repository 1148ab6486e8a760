import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bklv import (
    AllocationError,
    BudgetedCache,
    ConfigError,
    InputError,
    ModelConfig,
    append_and_evict,
    attend_with_cache,
    build_cache_set,
    memory_report,
    reset,
    scaled_dot_attention,
    uniform_plan,
)
from bklv.allocation import AllocationPlan, PlanParams

from .conftest import SMALL
from .reference import brute_attention, sink_window_trace

HEAD_DIM = 8


def _cache(budget, sinks=0, head_dim=HEAD_DIM):
    return BudgetedCache(budget=budget, sinks=sinks, head_dim=head_dim)


def _append_each(cache, n, rng, start=0):
    for pos in range(start, start + n):
        row = rng.normal(size=(1, cache.head_dim)).astype(np.float32)
        append_and_evict(cache, row, row + 1, np.array([pos]))


class TestAppendAndEvict:
    def test_sink_window_trace(self, rng):
        cache = _cache(budget=8, sinks=2)
        _append_each(cache, 10, rng)
        assert cache.positions.tolist() == [0, 1, 4, 5, 6, 7, 8, 9]
        assert cache.positions.tolist() == sink_window_trace(8, 2, 10)

    def test_pure_window_trace(self, rng):
        cache = _cache(budget=4, sinks=0)
        _append_each(cache, 10, rng)
        assert cache.positions.tolist() == [6, 7, 8, 9]
        assert cache.positions.tolist() == sink_window_trace(4, 0, 10)

    def test_no_eviction_when_under_budget(self, rng):
        cache = _cache(budget=16, sinks=2)
        _append_each(cache, 10, rng)
        assert cache.positions.tolist() == list(range(10))
        assert cache.total_seen == 10

    def test_batch_append_equals_single_steps(self, rng):
        one = _cache(budget=6, sinks=2)
        k = rng.normal(size=(11, HEAD_DIM)).astype(np.float32)
        v = rng.normal(size=(11, HEAD_DIM)).astype(np.float32)
        append_and_evict(one, k, v, np.arange(11))
        step = _cache(budget=6, sinks=2)
        for i in range(11):
            append_and_evict(step, k[i : i + 1], v[i : i + 1], np.array([i]))
        assert one.positions.tolist() == step.positions.tolist()
        assert np.array_equal(one.keys, step.keys)

    def test_positions_must_continue(self, rng):
        cache = _cache(budget=4)
        with pytest.raises(InputError, match="continue"):
            append_and_evict(
                cache,
                np.zeros((1, HEAD_DIM), np.float32),
                np.zeros((1, HEAD_DIM), np.float32),
                np.array([3]),
            )

    @settings(max_examples=60, deadline=None)
    @given(
        budget=st.integers(1, 20),
        sinks=st.integers(0, 6),
        chunks=st.lists(st.integers(1, 7), min_size=1, max_size=6),
    )
    def test_capacity_and_sink_retention(self, budget, sinks, chunks):
        if budget < sinks + 1:
            budget = sinks + 1
        cache = _cache(budget=budget, sinks=sinks)
        rng = np.random.default_rng(0)
        pos = 0
        for n in chunks:
            k = rng.normal(size=(n, HEAD_DIM)).astype(np.float32)
            append_and_evict(cache, k, k, np.arange(pos, pos + n))
            pos += n
            assert cache.retained <= budget
            kept = cache.positions.tolist()
            assert kept == sorted(kept)
            expected_sinks = list(range(min(sinks, pos)))
            assert kept[: len(expected_sinks)] == expected_sinks
        assert cache.total_seen == pos
        assert cache.positions.tolist() == sink_window_trace(budget, sinks, pos)


class TestAttendWithCache:
    def test_no_eviction_equals_full_attention(self, rng):
        cache = _cache(budget=32, sinks=0)
        k = rng.normal(size=(10, HEAD_DIM)).astype(np.float32)
        v = rng.normal(size=(10, HEAD_DIM)).astype(np.float32)
        append_and_evict(cache, k, v, np.arange(10))
        q = rng.normal(size=(10, HEAD_DIM)).astype(np.float32)
        got = attend_with_cache(cache, q)
        np.testing.assert_allclose(got, scaled_dot_attention(q, k, v), atol=1e-6)

    def test_after_eviction_matches_retained_subset_oracle(self, rng):
        cache = _cache(budget=6, sinks=2)
        k = rng.normal(size=(12, HEAD_DIM)).astype(np.float32)
        v = rng.normal(size=(12, HEAD_DIM)).astype(np.float32)
        for i in range(12):
            append_and_evict(cache, k[i : i + 1], v[i : i + 1], np.array([i]))
        q = rng.normal(size=(1, HEAD_DIM)).astype(np.float32)
        got = attend_with_cache(cache, q)
        kept = cache.positions.tolist()
        expected = brute_attention(q, k[kept], v[kept], causal=False)
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_single_retained_token_returns_its_value(self, rng):
        cache = _cache(budget=1, sinks=0)
        k = rng.normal(size=(1, HEAD_DIM)).astype(np.float32)
        v = rng.normal(size=(1, HEAD_DIM)).astype(np.float32)
        append_and_evict(cache, k, v, np.array([0]))
        q = rng.normal(size=(1, HEAD_DIM)).astype(np.float32)
        assert np.array_equal(attend_with_cache(cache, q), v)

    def test_empty_cache_is_input_error(self, rng):
        with pytest.raises(InputError):
            attend_with_cache(_cache(4), rng.normal(size=(1, HEAD_DIM)).astype(np.float32))

    def test_multi_row_causal_masking(self, rng):
        cache = _cache(budget=32, sinks=0)
        k = rng.normal(size=(6, HEAD_DIM)).astype(np.float32)
        v = rng.normal(size=(6, HEAD_DIM)).astype(np.float32)
        append_and_evict(cache, k, v, np.arange(6))
        q = rng.normal(size=(6, HEAD_DIM)).astype(np.float32)
        got = attend_with_cache(cache, q)
        expected = brute_attention(q, k, v, causal=True)
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_randomized_eviction_equivalence(self):
        # Randomized sequences of appends; attention over the store must equal
        # dense attention restricted to the retained positions.
        rng = np.random.default_rng(42)
        for trial in range(50):
            budget = int(rng.integers(3, 12))
            sinks = int(rng.integers(0, min(4, budget - 1) + 1))
            cache = _cache(budget=budget, sinks=sinks)
            total = int(rng.integers(budget, 3 * budget))
            k = rng.normal(size=(total, HEAD_DIM)).astype(np.float32)
            v = rng.normal(size=(total, HEAD_DIM)).astype(np.float32)
            pos = 0
            while pos < total:
                n = min(int(rng.integers(1, 4)), total - pos)
                append_and_evict(cache, k[pos : pos + n], v[pos : pos + n], np.arange(pos, pos + n))
                pos += n
            q = rng.normal(size=(1, HEAD_DIM)).astype(np.float32)
            kept = cache.positions.tolist()
            expected = brute_attention(q, k[kept], v[kept], causal=False)
            np.testing.assert_allclose(attend_with_cache(cache, q), expected, atol=1e-6)


class TestCacheSet:
    def test_full_compression_budgets(self):
        plan = uniform_plan(SMALL, 1.0)
        caches = build_cache_set(plan, SMALL)
        assert all(c.budget == SMALL.max_context for c in caches.all_caches())
        assert caches.total_seen == 0

    def test_budget_at_sink_floor_rejected(self):
        plan = uniform_plan(SMALL, 1.0, sinks=4)
        bad = AllocationPlan(
            plan.compression_ratio,
            plan.sinks,
            plan.budgets.copy(),
            "uniform",
            PlanParams(),
        )
        bad.budgets[1, 1] = 4  # equal to sinks: below floor sinks + 1
        with pytest.raises(AllocationError, match=r"layer 1 group 1"):
            build_cache_set(bad, SMALL)

    def test_total_capacity_is_sum_of_budgets(self):
        plan = uniform_plan(SMALL, 0.5)
        caches = build_cache_set(plan, SMALL)
        assert sum(c.budget for c in caches.all_caches()) == int(plan.budgets.sum())

    def test_dimension_mismatch(self):
        plan = uniform_plan(SMALL, 1.0)
        with pytest.raises(ConfigError):
            build_cache_set(plan, ModelConfig())

    def test_reset_preserves_budgets(self, rng):
        plan = uniform_plan(SMALL, 0.5)
        caches = build_cache_set(plan, SMALL)
        for grp, cache in enumerate(caches.caches[0]):
            _append_each(cache, 6, rng)
        reset(caches)
        assert caches.total_seen == 0
        assert [c.budget for c in caches.caches[0]] == plan.budgets[0].tolist()
        cache = caches.caches[0][0]
        _append_each(cache, 3, rng)
        assert cache.retained == 3

    def test_reset_idempotent(self):
        caches = build_cache_set(uniform_plan(SMALL, 1.0), SMALL)
        reset(caches)
        reset(caches)
        assert caches.total_seen == 0


class TestMemoryReport:
    def test_toy_default_full_budget_total(self):
        # 2 (K and V) * 512 tokens * head_dim 16 * 2 bytes * 16 caches
        cfg = ModelConfig()
        caches = build_cache_set(uniform_plan(cfg, 1.0), cfg)
        report = memory_report(caches, bytes_per_element=2)
        assert report.total_bytes == 2 * 512 * 16 * 2 * (4 * 4)
        assert report.total_bytes == 524288
        assert report.achieved_compression == 1.0

    def test_per_cache_bytes(self):
        caches = build_cache_set(uniform_plan(SMALL, 1.0), SMALL)
        report = memory_report(caches, bytes_per_element=4)
        assert report.per_cache_bytes[0, 0] == 2 * SMALL.max_context * SMALL.head_dim * 4

    def test_half_compression_ratio(self):
        cfg = ModelConfig()
        caches = build_cache_set(uniform_plan(cfg, 0.5), cfg)
        report = memory_report(caches)
        assert abs(report.achieved_compression - 0.5) < 1.0 / cfg.max_context
