"""Query and recurrent aggregation: attention plumbing, invariance,
gradient flow, and the effect of the reversed post-processing pass."""

import numpy as np
import pytest

from setnets import autodiff as ad
from setnets.aggregations import EmptyPopulationError, SimpleAggregation
from setnets.autodiff import Rng
from setnets.recurrent import (
    QueryAggregationParams,
    attention_logits,
    init_lstm,
    init_query_aggregation,
    init_recurrent_aggregation,
    lstm_step,
    normalize,
    query_aggregate,
    recurrent_aggregate,
    recurrent_aggregate_trace,
)


class TestAttentionLogits:
    def test_basis_rows_read_off_the_query(self):
        e = ad.constant(np.eye(2))
        out = attention_logits(e, ad.constant([2.0, 3.0]))
        np.testing.assert_array_equal(out.values, [2.0, 3.0])

    def test_zero_query_gives_zero_logits(self):
        e = ad.constant(np.random.default_rng(0).normal(size=(5, 3)))
        out = attention_logits(e, ad.constant(np.zeros(3)))
        np.testing.assert_array_equal(out.values, np.zeros(5))

    def test_row_permutation_permutes_logits(self):
        rng = np.random.default_rng(1)
        e = rng.normal(size=(6, 4))
        q = rng.normal(size=4)
        perm = rng.permutation(6)
        a = attention_logits(ad.constant(e), ad.constant(q)).values
        b = attention_logits(ad.constant(e[perm]), ad.constant(q)).values
        np.testing.assert_allclose(b, a[perm], atol=1e-15)

    def test_width_mismatch_raises(self):
        with pytest.raises(ad.ShapeMismatchError):
            attention_logits(ad.constant(np.ones((3, 4))), ad.constant(np.ones(5)))


class TestNormalize:
    def test_uniform_on_equal_logits(self):
        np.testing.assert_allclose(normalize(ad.constant([0.0, 0.0])).values,
                                   [0.5, 0.5], atol=1e-15)

    def test_log_odds(self):
        out = normalize(ad.constant([np.log(1.0), np.log(3.0)]))
        np.testing.assert_allclose(out.values, [0.25, 0.75], atol=1e-12)

    def test_equivariance(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=7)
        perm = rng.permutation(7)
        a = normalize(ad.constant(logits)).values
        b = normalize(ad.constant(logits[perm])).values
        np.testing.assert_allclose(b, a[perm], atol=1e-15)


class TestQueryAggregate:
    def test_zero_query_with_sum_base_is_the_mean(self):
        rng = np.random.default_rng(3)
        e = rng.normal(size=(6, 4))
        params = init_query_aggregation(4, SimpleAggregation("sum"))
        out = query_aggregate(params, ad.constant(e))
        np.testing.assert_allclose(out.values, e.mean(axis=0), atol=1e-12)

    @pytest.mark.parametrize("base", ["sum", "mean", "max", "logsumexp"])
    def test_singleton_population_returns_its_row(self, base):
        row = np.array([[0.7, -2.0, 1.1]])
        params = init_query_aggregation(3, SimpleAggregation(base))
        params.q1.values = np.random.default_rng(4).normal(size=3)
        out = query_aggregate(params, ad.constant(row))
        np.testing.assert_allclose(out.values, row[0], atol=1e-12)

    def test_invariance_under_permutation(self):
        rng = np.random.default_rng(5)
        e = rng.normal(size=(9, 5))
        params = init_query_aggregation(5, SimpleAggregation("sum"))
        params.q1.values = rng.normal(size=5)
        a = query_aggregate(params, ad.constant(e)).values
        for _ in range(20):
            b = query_aggregate(params, ad.constant(e[rng.permutation(9)])).values
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_population_propagates(self):
        params = init_query_aggregation(3)
        with pytest.raises(EmptyPopulationError):
            query_aggregate(params, ad.constant(np.zeros((0, 3))))

    def test_gradient_reaches_the_query(self):
        rng = np.random.default_rng(6)
        e = ad.constant(rng.normal(size=(5, 3)))
        params = init_query_aggregation(3, SimpleAggregation("sum"))
        out = query_aggregate(params, e)
        ad.backward(ad.reduce_sum(out, 0))
        assert params.q1.grad is not None
        assert np.linalg.norm(params.q1.grad) > 0


class TestLstmCell:
    def test_step_shapes(self):
        cell = init_lstm(Rng(0), 3, 3)
        h, c = lstm_step(cell, ad.constant(np.ones(3)),
                         ad.constant(np.zeros(3)), ad.constant(np.zeros(3)))
        assert h.shape == (3,) and c.shape == (3,)

    def test_batched_step_matches_loop(self):
        cell = init_lstm(Rng(1), 3, 3)
        rng = np.random.default_rng(7)
        xs = rng.normal(size=(4, 3))
        hs = rng.normal(size=(4, 3))
        cs = rng.normal(size=(4, 3))
        hb, cb = lstm_step(cell, ad.constant(xs), ad.constant(hs), ad.constant(cs))
        for i in range(4):
            hi, ci = lstm_step(cell, ad.constant(xs[i]), ad.constant(hs[i]),
                               ad.constant(cs[i]))
            np.testing.assert_allclose(hb.values[i], hi.values, atol=1e-14)
            np.testing.assert_allclose(cb.values[i], ci.values, atol=1e-14)

    def test_forget_gate_bias_initialized_open(self):
        cell = init_lstm(Rng(2), 4, 4)
        np.testing.assert_array_equal(cell.bias.values[4:8], np.ones(4))
        np.testing.assert_array_equal(cell.bias.values[:4], np.zeros(4))


def _random_recurrent(seed, k=4, steps=3, base="sum", backward="lstm"):
    params = init_recurrent_aggregation(Rng(seed), k=k, steps=steps,
                                        base=SimpleAggregation(base),
                                        backward=backward)
    params.q1.values = Rng(seed).child("q1").normal((k,)).values * 0.3
    return params


class TestRecurrentAggregate:
    def test_single_step_with_last_readout_matches_query_aggregate(self):
        params = _random_recurrent(0, steps=1, backward="last")
        query_params = QueryAggregationParams(q1=params.q1, base=params.base)
        e = ad.constant(np.random.default_rng(8).normal(size=(7, 4)))
        a = recurrent_aggregate(params, e).values
        b = query_aggregate(query_params, e).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    @pytest.mark.parametrize("base", ["sum", "mean", "max", "logsumexp"])
    @pytest.mark.parametrize("steps", [1, 3, 5])
    def test_invariance_for_every_base_and_depth(self, base, steps):
        params = _random_recurrent(10 + steps, base=base, steps=steps)
        rng = np.random.default_rng(steps)
        e = rng.normal(size=(8, 4)) * 2
        reference = recurrent_aggregate(params, ad.constant(e)).values
        for _ in range(50):
            permuted = e[rng.permutation(8)]
            out = recurrent_aggregate(params, ad.constant(permuted)).values
            np.testing.assert_allclose(out, reference, atol=1e-10)

    def test_duplicated_population_is_a_fixed_point_for_sum_base(self):
        # softmax weights halve and the weighted sum is unchanged, so every
        # step result and hence the whole recurrence is unchanged
        rng = np.random.default_rng(9)
        for seed in range(5):
            params = _random_recurrent(20 + seed, base="sum")
            e = rng.normal(size=(6, 4))
            a = recurrent_aggregate(params, ad.constant(e)).values
            b = recurrent_aggregate(params, ad.constant(np.vstack([e, e]))).values
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_batched_forward_matches_per_population(self):
        params = _random_recurrent(30)
        rng = np.random.default_rng(10)
        batch = rng.normal(size=(5, 6, 4))
        stacked = recurrent_aggregate(params, ad.constant(batch)).values
        for i in range(5):
            single = recurrent_aggregate(params, ad.constant(batch[i])).values
            np.testing.assert_allclose(stacked[i], single, atol=1e-12)

    def test_empty_population_propagates(self):
        params = _random_recurrent(40)
        with pytest.raises(EmptyPopulationError):
            recurrent_aggregate(params, ad.constant(np.zeros((0, 4))))

    def test_bad_configurations_rejected(self):
        with pytest.raises(ValueError):
            init_recurrent_aggregation(Rng(0), 4, steps=0)
        with pytest.raises(ValueError):
            init_recurrent_aggregation(Rng(0), 4, backward="mean")


class TestGradientFlow:
    def test_grad_check_through_the_recurrence(self):
        params = _random_recurrent(50, k=3, steps=2)
        e0 = np.random.default_rng(11).normal(size=(4, 3))

        def f(x):
            return ad.reduce_sum(recurrent_aggregate(params, x), 0)

        err = ad.grad_check(f, ad.parameter(e0))
        assert err <= 1e-4

    def test_grad_check_into_the_initial_query(self):
        params = _random_recurrent(51, k=3, steps=2)
        e = ad.constant(np.random.default_rng(12).normal(size=(4, 3)))

        def f(q):
            params.q1 = q
            return ad.reduce_sum(recurrent_aggregate(params, e), 0)

        err = ad.grad_check(f, ad.parameter(np.zeros(3)))
        assert err <= 1e-4


class TestReversalEffect:
    """Without the backward pass the final query dominates the output; the
    reversed post-processing hands the leverage back to the first query."""

    @staticmethod
    def _sensitivities(backward, seed, steps=4, k=6, n=8):
        rng = Rng(seed)
        params = init_recurrent_aggregation(rng, k=k, steps=steps,
                                            base=SimpleAggregation("sum"),
                                            backward=backward)
        params.q1.values = rng.child("q").normal((k,)).values * 0.5
        e = ad.constant(np.random.default_rng(seed).normal(size=(n, k)))
        out, queries, _ = recurrent_aggregate_trace(params, e)
        ad.backward(ad.reduce_sum(out, 0))
        return (np.linalg.norm(params.q1.grad),
                np.linalg.norm(queries[-1].grad))

    def test_last_readout_is_dominated_by_the_final_query(self):
        for seed in range(6):
            g_first, g_last = self._sensitivities("last", seed)
            assert g_first < g_last

    def test_backward_pass_flips_the_ordering(self):
        # representative seeded instance of the designed tendency
        g_first, g_last = self._sensitivities("lstm", 0)
        assert g_first > g_last
        g_first_plain, g_last_plain = self._sensitivities("last", 0)
        assert g_first_plain < g_last_plain
