"""Losses, population-size sampling, Adam, and the training loop."""

import math
from dataclasses import replace

import numpy as np
import pytest

from setnets import autodiff as ad
from setnets.autodiff import Rng
from setnets.model import AggregationSpec, build_model
from setnets.tasks import Circle, DomainError
from setnets.training import (
    Adam,
    InvalidRangeError,
    TrainConfig,
    apply_head,
    circle_loss,
    clip_gradients,
    mixture_loss,
    population_batch_loss,
    sample_batch,
    sample_population_size,
    train,
)

TINY = dict(embed_widths=(8, 8), combine_widths=(8,), process_widths=(8,))


class TestPopulationSizeSampling:
    def test_singleton_range(self):
        rng = Rng(0)
        assert all(sample_population_size(rng, 100, 100) == 100 for _ in range(20))

    def test_two_point_range_weights(self):
        rng = Rng(1)
        draws = np.array([sample_population_size(rng, 1, 2) for _ in range(10_000)])
        assert abs((draws == 2).mean() - 2 / 3) <= 0.02

    def test_mean_of_linear_law(self):
        rng = Rng(2)
        draws = np.array([sample_population_size(rng, 10, 100) for _ in range(100_000)])
        sizes = np.arange(10, 101)
        expected = (sizes ** 2).sum() / sizes.sum()
        assert abs(draws.mean() - expected) <= 1.0

    def test_invalid_ranges(self):
        with pytest.raises(InvalidRangeError):
            sample_population_size(Rng(0), 5, 4)
        with pytest.raises(InvalidRangeError):
            sample_population_size(Rng(0), 0, 4)


class TestCircleLoss:
    def test_exact_prediction_scores_zero(self):
        target = Circle((1.0, -2.0), 0.7)
        pred = ad.constant([1.0, -2.0, 0.7])
        assert circle_loss(pred, target).item() == 0.0

    def test_unit_center_offset(self):
        target = Circle((0.0, 0.0), 1.0)
        pred = ad.constant([1.0, 0.0, 1.0])
        assert circle_loss(pred, target).item() == 1.0

    def test_gradient_check(self):
        target = Circle((0.3, -0.2), 0.9)

        def f(raw):
            return circle_loss(apply_head("circle_head", raw), target)

        err = ad.grad_check(f, ad.parameter([0.5, 0.1, -0.3]))
        assert err <= 1e-6

    def test_head_maps_radius_through_softplus(self):
        pred = apply_head("circle_head", ad.constant([2.0, 3.0, 0.0]))
        np.testing.assert_allclose(pred.values, [2.0, 3.0, math.log(2.0)], atol=1e-12)


class TestMixtureLoss:
    def test_raw_params_mapping_to_uniform_beta_score_zero(self):
        c = math.log(math.e - 1.0)  # softplus(c) == 1
        for w in (0.1, 0.45):
            assert abs(mixture_loss(ad.constant([c, c]), w).item()) <= 1e-12

    def test_concentrated_beta_beats_uniform_at_its_mode(self):
        # Beta(30, 70): sharp around 0.3, density well above 1 there
        raw = np.log(np.expm1(np.array([30.0, 70.0])))
        loss = mixture_loss(ad.constant(raw), 0.3).item()
        assert loss < 0.0

    def test_gradient_check(self):
        err = ad.grad_check(lambda raw: mixture_loss(raw, 0.25),
                            ad.parameter([0.4, 1.2]))
        assert err <= 1e-6

    def test_domain_error_propagates(self):
        with pytest.raises(DomainError):
            mixture_loss(ad.constant([0.5, 0.5]), 1.0)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = ad.parameter([1.0, 2.0, 3.0])
        before = p.values.copy()
        opt = Adam([("p", p)], lr=0.1)
        p.grad = np.zeros(3)
        opt.step()
        np.testing.assert_array_equal(p.values, before)
        p.grad = None
        opt.step()
        np.testing.assert_array_equal(p.values, before)

    def test_descends_a_quadratic(self):
        p = ad.parameter([5.0])
        opt = Adam([("p", p)], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            ad.backward(ad.reduce_sum(ad.mul(p, p), 0))
            opt.step()
        assert abs(p.values[0]) < 0.1

    def test_clip_gradients_scales_to_the_cap(self):
        p = ad.parameter([1.0])
        p.grad = np.array([30.0])
        norm = clip_gradients([("p", p)], 10.0)
        assert norm == 30.0
        np.testing.assert_allclose(p.grad, [10.0])

    def test_clip_leaves_small_gradients_alone(self):
        p = ad.parameter([1.0])
        p.grad = np.array([3.0])
        clip_gradients([("p", p)], 10.0)
        np.testing.assert_array_equal(p.grad, [3.0])


class TestTrainConfig:
    def test_roundtrip_through_dict(self):
        cfg = TrainConfig.defaults(
            "mixture", seed=7,
            final_agg=AggregationSpec(variant="recurrent", kind="sum", steps=4))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_range_validation_per_task(self):
        with pytest.raises(InvalidRangeError):
            TrainConfig.defaults("circle", n_min=2, n_max=2)
        with pytest.raises(InvalidRangeError):
            TrainConfig.defaults("mixture", n_min=1, n_max=50)

    def test_config_id_is_stable_and_sensitive(self):
        a = TrainConfig.defaults("circle", seed=1)
        b = TrainConfig.defaults("circle", seed=1)
        c = TrainConfig.defaults("circle", seed=2)
        assert a.config_id() == b.config_id()
        assert a.config_id() != c.config_id()


def _tiny_config(task, **overrides):
    kw = dict(steps=60, batch_size=4, eval_populations=20, seed=3, **TINY)
    if task == "circle":
        kw.update(n_min=5, n_max=5)
    else:
        kw.update(n_min=5, n_max=12)
    kw.update(overrides)
    return TrainConfig.defaults(task, **kw)


class TestTrainLoop:
    def test_deterministic_records(self):
        cfg = _tiny_config("circle")
        _, rec_a = train(cfg)
        _, rec_b = train(cfg)
        assert rec_a.scientific_dict() == rec_b.scientific_dict()
        assert rec_a.losses == rec_b.losses

    def test_zero_learning_rate_keeps_initial_parameters(self):
        cfg = _tiny_config("circle", learning_rate=0.0, steps=25)
        model, rec = train(cfg)
        fresh = build_model(cfg.arch(), Rng(cfg.seed).child("init"))
        for (name, a), (_, b) in zip(model.parameters(), fresh.parameters()):
            assert np.array_equal(a.values, b.values), name

    def test_record_contents(self):
        cfg = _tiny_config("mixture")
        _, rec = train(cfg)
        assert rec.status == "ok"
        assert rec.config_id == cfg.config_id()
        assert rec.losses[0][0] == 0
        assert rec.losses[-1][0] == cfg.steps - 1
        assert set(rec.metrics) == {"beta_nll", "est_abs_err"}
        assert rec.meta["embedding_dim"] == 8
        assert rec.meta["train_n_max"] == cfg.n_max
        assert rec.seconds > 0

    def test_non_finite_loss_aborts_with_step_index(self, monkeypatch):
        cfg = _tiny_config("circle")
        calls = {"count": 0}
        import setnets.training as training_module
        real = training_module.sample_batch

        def poisoned(config, rng):
            pops, targets = real(config, rng)
            if calls["count"] >= 7:
                targets = targets * np.nan
            calls["count"] += 1
            return pops, targets

        monkeypatch.setattr(training_module, "sample_batch", poisoned)
        _, rec = train(cfg)
        assert rec.status == "non_finite_loss"
        assert rec.failed_step == 7
        assert rec.metrics == {}

    def test_loss_decreases_on_a_fixed_batch_for_all_simple_configs(self):
        kinds = ("mean", "max", "logsumexp")
        for task in ("circle", "mixture"):
            for ek in kinds:
                for fk in kinds:
                    cfg = _tiny_config(
                        task,
                        equivariant_agg=AggregationSpec(kind=ek),
                        final_agg=AggregationSpec(kind=fk))
                    model = build_model(cfg.arch(), Rng(0).child("init"))
                    params = list(model.parameters())
                    opt = Adam(params, lr=1e-3)
                    pops, targets = sample_batch(cfg, Rng(1).child("fixed"))
                    first = last = None
                    for _ in range(100):
                        loss = population_batch_loss(model, cfg.head, pops, targets)
                        if first is None:
                            first = loss.item()
                        last = loss.item()
                        opt.zero_grad()
                        ad.backward(loss)
                        clip_gradients(params, cfg.clip_norm)
                        opt.step()
                    assert last < first, (task, ek, fk, first, last)


class TestSampleBatch:
    def test_circle_batch_shapes_and_labels(self):
        cfg = _tiny_config("circle", batch_size=6)
        pops, targets = sample_batch(cfg, Rng(4))
        assert pops.shape == (6, 5, 2)
        assert targets.shape == (6, 3)
        assert np.all(targets[:, 2] > 0)

    def test_mixture_batch_shares_one_size(self):
        cfg = _tiny_config("mixture", batch_size=5)
        sizes = set()
        for step in range(8):
            pops, targets = sample_batch(cfg, Rng(5).child(str(step)))
            assert pops.shape[0] == 5 and pops.shape[2] == 2
            assert np.all((targets > 0) & (targets <= 0.5))
            sizes.add(pops.shape[1])
        assert len(sizes) > 1  # the size really is resampled per step
