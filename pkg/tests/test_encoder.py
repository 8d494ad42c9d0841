import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from stcl.encoder import (
    AdamW,
    ContrastiveEncoder,
    ToyEncoder,
    TrainConfig,
    encoder_forward,
    fit_pairs,
    lr_at_step,
    pair_loss_and_grads,
    train_contrastive,
)
from stcl.losses import LossConfig, infonce_batch
from stcl.pairs import PairManifest, PosPair


def flat_loss(enc, flat, xa, xb, cfg):
    e = enc.copy()
    e.set_flat(flat)
    n = len(xa)
    z = e.forward(np.concatenate([xa, xb]))
    return infonce_batch(z[:n], z[n:], cfg)


def self_manifest(ids):
    return PairManifest([PosPair("self", i, i, 0.0, True) for i in ids], seed=0)


class TestForward:
    def test_default_shape_and_param_count(self):
        enc = ToyEncoder.init(32)
        assert enc.layer_sizes == [32, 256, 128, 64]
        assert enc.n_params == 32 * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64

    def test_identity(self, rng):
        x = rng.normal(size=6)
        np.testing.assert_allclose(encoder_forward(ToyEncoder.identity(6), x), x / np.linalg.norm(x), atol=1e-15)

    def test_zero_weights_rejected(self):
        enc = ToyEncoder([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
        with pytest.raises(ValueError):
            enc.forward(np.ones(3))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ToyEncoder.init(4, (8,), 3).forward(np.ones(5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_unit_norm_and_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        enc = ToyEncoder.init(5, (7,), 3, seed=seed)
        x = rng.normal(size=(4, 5))
        z = enc.forward(x)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(z, enc.forward(x))

    def test_flat_round_trip(self):
        enc = ToyEncoder.init(5, (7, 6), 4, seed=1)
        other = ToyEncoder.init(5, (7, 6), 4, seed=2)
        other.set_flat(enc.get_flat())
        np.testing.assert_array_equal(other.get_flat(), enc.get_flat())


class TestParameterGradient:
    @pytest.mark.parametrize("seed", range(10))
    def test_full_gradient_vs_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        enc = ToyEncoder.init(5, (7, 6), 4, seed=seed)
        for b in enc.biases:
            b[...] = rng.normal(0, 0.1, size=b.shape)
        xa, xb = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        cfg = LossConfig(temperature=0.5)
        _, grads = pair_loss_and_grads(enc, xa, xb, cfg)
        analytic = np.concatenate([g.ravel() for g in grads])
        flat = enc.get_flat()
        h = 1e-5
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            numeric[i] = (flat_loss(enc, up, xa, xb, cfg) - flat_loss(enc, dn, xa, xb, cfg)) / (2 * h)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) <= 1e-4


class TestSchedule:
    def test_full_scale_profile_points(self):
        cfg = TrainConfig.full_scale()
        assert lr_at_step(cfg, 0) == 0.0
        assert lr_at_step(cfg, 40) == pytest.approx(6e-6, abs=1e-18)
        assert abs(lr_at_step(cfg, 170) - 3e-6) <= 1e-12
        assert lr_at_step(cfg, 300) == pytest.approx(0.0, abs=1e-20)

    def test_full_scale_profile_values(self):
        cfg = TrainConfig.full_scale()
        assert (cfg.batch_size, cfg.base_lr, cfg.weight_decay, cfg.epochs, cfg.warmup_epochs) == (1024, 6e-6, 1e-6, 300, 40)

    @given(st.floats(0, 300))
    def test_formula(self, e):
        cfg = TrainConfig.full_scale()
        expect = 6e-6 * e / 40 if e < 40 else 6e-6 * 0.5 * (1 + math.cos(math.pi * (e - 40) / 260))
        assert lr_at_step(cfg, e) == pytest.approx(expect, rel=1e-12, abs=1e-20)

    def test_invalid_warmup(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=5, warmup_epochs=5)


class TestAdamW:
    def test_single_step_oracle(self):
        p = np.array([1.0, -2.0])
        g = np.array([0.5, 0.25])
        opt = AdamW([p], weight_decay=0.1)
        opt.step([g], lr=0.01)
        # after one step the bias-corrected moments are g and g**2
        expect = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p, expect, rtol=1e-12)


class TestTraining:
    def test_two_pair_smoke(self, rng):
        obs = {f"x{i}": rng.normal(size=6) for i in range(4)}
        manifest = PairManifest([PosPair("temporal", "x0", "x1", 0, True), PosPair("temporal", "x2", "x3", 0, True)], 0)
        cfg = TrainConfig(batch_size=2, epochs=10, warmup_epochs=0, base_lr=1e-3, hidden=(8,), embed_dim=4)
        res = train_contrastive(manifest, obs, cfg)
        steps = res.step_loss
        assert len(steps) == 10
        assert all(b <= a for a, b in zip(steps[1:], steps[2:]))

    def test_one_pair_rejected(self, rng):
        with pytest.raises(ValueError):
            train_contrastive(PairManifest([PosPair("temporal", "a", "b", 0, True)], 0), {"a": np.ones(2), "b": np.ones(2)})

    def test_missing_id_named(self):
        with pytest.raises(ValueError, match="ghost"):
            train_contrastive(self_manifest(["a", "ghost"]), {"a": np.ones(3)})

    def test_duplicated_pairs_ln_batch(self, rng):
        enc = ToyEncoder.init(6, (8,), 4, seed=0)
        x = rng.normal(size=(1, 6))
        xa, xb = np.repeat(x, 16, axis=0), np.repeat(rng.normal(size=(1, 6)), 16, axis=0)
        loss, _ = pair_loss_and_grads(enc, xa, xb, LossConfig())
        assert loss == pytest.approx(math.log(16), abs=1e-12)

    def test_deterministic_and_decreasing(self, rng):
        X = rng.normal(size=(64, 8))
        pairs = np.array([(i, i) for i in range(64)])
        cfg = TrainConfig(batch_size=16, epochs=8, warmup_epochs=1, hidden=(16,), embed_dim=8, seed=3)
        a = fit_pairs(X, pairs, np.ones(64, bool), cfg)
        b = fit_pairs(X, pairs, np.ones(64, bool), cfg)
        assert a.epoch_loss == b.epoch_loss
        np.testing.assert_array_equal(a.encoder.get_flat(), b.encoder.get_flat())
        assert a.epoch_loss[-1] < a.epoch_loss[0]


class TestEstimator:
    def test_get_params_and_clone(self):
        est = ContrastiveEncoder(n_components=8, max_epochs=3, warmup_epochs=1)
        assert est.get_params()["n_components"] == 8
        assert clone(est).get_params() == est.get_params()

    def test_fit_transform(self, rng):
        X = rng.normal(size=(40, 6))
        est = ContrastiveEncoder(hidden_layer_sizes=(12,), n_components=4, max_epochs=3, warmup_epochs=1, batch_size=8)
        Z = est.fit_transform(X)
        assert Z.shape == (40, 4)
        np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-9)
        assert len(est.loss_curve_) == 3

    def test_fit_with_pairs(self, rng):
        X = rng.normal(size=(10, 3))
        est = ContrastiveEncoder(hidden_layer_sizes=(5,), n_components=2, max_epochs=2, warmup_epochs=0)
        est.fit(X, pairs=[(0, 1), (2, 3), (4, 5)])
        with pytest.raises(ValueError):
            est.fit(X, pairs=[(0, 10), (1, 2)])
        with pytest.raises(ValueError):
            est.transform(rng.normal(size=(2, 4)))
