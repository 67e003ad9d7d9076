import math

import numpy as np
import pytest

from hypood.datagen import make_blobs
from hypood.encoder import Encoder, MlpSpec
from hypood.errors import DimMismatch, InvalidParam
from hypood.objectives import LossConfig, combined_loss
from hypood.prototypes import ema_batch, random_init
from hypood.trainer import (
    TrainConfig,
    batch_objective,
    cosine_lr,
    initial_prototypes,
    sgd_step,
    train,
    train_linear_probe,
)

SPEC = MlpSpec(input_dim=6, hidden_dims=(16,), penultimate_dim=16, proj_dim=8)


def small_data(seed=0, noise=0.5):
    return make_blobs(3, 40, 6, separation=4.0, noise_sigma=noise, seed=seed)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 10, 0.5) == 0.5
        assert cosine_lr(5, 10, 0.5) == pytest.approx(0.25, abs=1e-15)
        assert cosine_lr(10, 10, 0.5) == 0.0

    def test_monotone(self):
        lrs = [cosine_lr(t, 37, 1.0) for t in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(InvalidParam):
            cosine_lr(11, 10, 0.1)


class TestSgd:
    def test_two_step_recurrence(self):
        w = np.array([1.0, -2.0])
        v = np.zeros(2)
        g = np.array([0.5, 0.25])
        lr, mu, wd = 0.1, 0.9, 0.01
        w_ref, v_ref = w.copy(), v.copy()
        for _ in range(2):
            sgd_step([w], [g], [v], lr, mu, wd)
            v_ref = mu * v_ref + g + wd * w_ref
            w_ref = w_ref - lr * v_ref
        np.testing.assert_allclose(w, w_ref, rtol=1e-15)
        np.testing.assert_allclose(v, v_ref, rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimMismatch):
            sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9, 0.0)


class TestBatchObjective:
    def test_value_matches_direct_loss(self, rng):
        enc = Encoder.init(SPEC, seed=1)
        X = rng.normal(size=(10, 6))
        y = rng.integers(0, 3, 10)
        bank = random_init(3, 8, seed=1)
        cfg = LossConfig("cider")
        res = batch_objective(enc, X, y, bank.copy(), cfg)
        b2 = bank.copy()
        z = enc.forward(X).z
        ema_batch(b2, z, y)
        assert res.value == pytest.approx(combined_loss(cfg, z, y, b2).value, rel=1e-14)

    def test_updates_bank_in_place(self, rng):
        enc = Encoder.init(SPEC, seed=1)
        bank = random_init(3, 8, seed=1)
        before = bank.vectors.copy()
        batch_objective(enc, rng.normal(size=(4, 6)), [0, 1, 1, 0], bank, LossConfig())
        assert not np.array_equal(before[:2], bank.vectors[:2])
        np.testing.assert_array_equal(before[2], bank.vectors[2])


class TestTrain:
    def test_zero_epochs_leaves_weights(self):
        enc = Encoder.init(SPEC, seed=0)
        before = [p.copy() for p in enc.params]
        _, bank, hist = train(enc, small_data(), TrainConfig(epochs=0))
        assert len(hist) == 0
        for p, q in zip(enc.params, before):
            np.testing.assert_array_equal(p, q)
        np.testing.assert_allclose(np.linalg.norm(bank.vectors, axis=1), 1.0, atol=1e-14)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=3, batch_size=32, seed=4)
        a = train(Encoder.init(SPEC, 4), small_data(), cfg)
        b = train(Encoder.init(SPEC, 4), small_data(), cfg)
        for p, q in zip(a[0].params, b[0].params):
            np.testing.assert_array_equal(p, q)
        np.testing.assert_array_equal(a[1].vectors, b[1].vectors)
        assert a[2].loss == b[2].loss

    def test_step_callback_and_partial_batch(self):
        steps = []
        cfg = TrainConfig(epochs=2, batch_size=50)
        train(Encoder.init(SPEC), small_data(), cfg, on_step=lambda s, z, bank: steps.append((s, z.shape[0])))
        # 120 samples -> batches of 50, 50, 20; each batch holds two views
        assert [n for _, n in steps] == [100, 100, 40] * 2
        assert [s for s, _ in steps] == list(range(1, 7))

    def test_history_lr_follows_schedule(self):
        cfg = TrainConfig(epochs=4, batch_size=60, lr0=0.2)
        _, _, hist = train(Encoder.init(SPEC), small_data(), cfg)
        assert hist.lr == [cosine_lr(2 * e, 8, 0.2) for e in range(4)]

    def test_loss_decreases(self):
        drops = []
        for seed in range(5):
            data = small_data(seed, noise=0.0)
            _, _, hist = train(Encoder.init(SPEC, seed), data, TrainConfig(epochs=15, batch_size=32, seed=seed))
            drops.append(hist.loss[-1] < hist.loss[0])
        assert all(drops)

    def test_ce_needs_head(self):
        with pytest.raises(InvalidParam):
            train(Encoder.init(SPEC), small_data(), TrainConfig(epochs=1, loss=LossConfig("ce")))

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            train(Encoder.init(MlpSpec(input_dim=3, proj_dim=4)), small_data(), TrainConfig(epochs=1))

    def test_random_init_prototypes(self):
        cfg = TrainConfig(epochs=0, prototype_init="random", seed=3)
        bank = initial_prototypes(Encoder.init(SPEC), small_data(), cfg)
        np.testing.assert_array_equal(bank.vectors, random_init(3, 8, seed=3).vectors)


class TestProbe:
    def test_separable(self, rng):
        d = make_blobs(3, 60, 5, separation=10.0, noise_sigma=0.1, seed=0)
        _, acc = train_linear_probe(d.features, d.labels)
        assert acc == 1.0

    def test_shuffled_labels_near_chance(self):
        d = make_blobs(4, 200, 5, separation=10.0, noise_sigma=0.1, seed=1)
        y = np.random.default_rng(0).permutation(d.labels)
        _, acc = train_linear_probe(d.features, y)
        assert abs(acc - 0.25) < 0.1

    def test_identical_features_predict_majority(self):
        F = np.ones((50, 3))
        y = np.array([0] * 35 + [1] * 15)
        probe, acc = train_linear_probe(F, y, seed=2)
        pred = probe.predict(F)
        assert len(set(pred.tolist())) == 1
        assert math.isfinite(acc)

    def test_seeded(self, rng):
        F = rng.normal(size=(40, 4))
        y = rng.integers(0, 2, 40)
        assert train_linear_probe(F, y, seed=5)[1] == train_linear_probe(F, y, seed=5)[1]

    def test_invalid(self):
        with pytest.raises(InvalidParam):
            train_linear_probe(np.ones((1, 2)), np.array([0]))
