import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nearood.bench import BenchConfig, generate
from nearood.errors import (
    ConfigInvalid,
    DimensionMismatch,
    EpsilonOutOfRange,
    LabelOutOfRange,
    NonFiniteLoss,
)
from nearood.metrics import id_accuracy
from nearood.trainer import (
    ClassifierParams,
    TrainConfig,
    extract_features,
    forward,
    forward_batch,
    init_params,
    load_params,
    loss_and_gradient,
    save_params,
    smooth_targets,
    train,
)
from nearood.numerics import RngState


def golden_params():
    """Hand-set net: 2 -> ReLU(2) -> head(2), checked on paper."""
    return ClassifierParams(
        weights=(
            np.array([[1.0, -1.0], [0.5, 0.25]]),
            np.array([[1.0, 2.0], [-1.0, 0.5]]),
        ),
        biases=(np.array([0.1, -0.2]), np.array([0.0, 0.3])),
    )


def zero_params(d=3, p=2, c=2):
    return ClassifierParams(
        weights=(np.zeros((p, d)), np.zeros((c, p))),
        biases=(np.zeros(p), np.zeros(c)),
    )


def random_params(rng, d, hidden, p, c):
    sizes = (d, *hidden, p, c)
    return init_params(sizes, RngState(int(rng.integers(0, 2**32))))


def blob_dataset(seed=5):
    cfg = BenchConfig(
        input_dim=4,
        background_dim=1,
        class_count=2,
        ood_class_count=0,
        samples_per_class=100,
        background_scale=0.3,
        semantic_separation=3.0,
        noise_scale=0.2,
        seed=seed,
    )
    return generate(cfg)


class TestSmoothTargets:
    def test_zero_epsilon_is_one_hot(self):
        t = smooth_targets([0, 2, 1], 3, 0.0)
        assert np.array_equal(t, np.eye(3)[[0, 2, 1]])

    def test_two_class_value(self):
        t = smooth_targets([0], 2, 0.1)
        assert t[0] == pytest.approx([0.95, 0.05], abs=1e-15)

    def test_fifteen_class_value(self):
        t = smooth_targets([3], 15, 0.1)
        assert t[0, 3] == pytest.approx(0.9 + 0.1 / 15, abs=1e-15)
        off = np.delete(t[0], 3)
        assert off == pytest.approx(np.full(14, 0.1 / 15), abs=1e-15)
        assert t[0].sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        epsilon=st.floats(min_value=0.0, max_value=0.999),
        class_count=st.integers(min_value=1, max_value=40),
        data=st.data(),
    )
    def test_rows_sum_to_one(self, epsilon, class_count, data):
        labels = data.draw(
            st.lists(st.integers(0, class_count - 1), min_size=1, max_size=20)
        )
        t = smooth_targets(labels, class_count, epsilon)
        assert np.max(np.abs(t.sum(axis=1) - 1.0)) < 1e-12
        assert np.all(t >= epsilon / class_count - 1e-15)

    def test_epsilon_out_of_range(self):
        with pytest.raises(EpsilonOutOfRange):
            smooth_targets([0], 2, 1.0)
        with pytest.raises(EpsilonOutOfRange):
            smooth_targets([0], 2, -0.1)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            smooth_targets([2], 2, 0.1)


class TestForward:
    def test_zero_net_gives_zero_logits(self):
        logits, penult = forward(zero_params(), [1.0, -2.0, 3.0])
        assert np.array_equal(logits, [0.0, 0.0])
        assert np.array_equal(penult, [0.0, 0.0])

    def test_golden_hand_computation(self):
        logits, penult = forward(golden_params(), [1.0, 2.0])
        assert penult == pytest.approx([0.0, 0.8], abs=1e-15)
        assert logits == pytest.approx([1.6, 0.7], abs=1e-15)

    def test_penultimate_nonnegative(self):
        rng = np.random.default_rng(0)
        params = random_params(rng, 6, (5,), 4, 3)
        for _ in range(10):
            logits, penult = forward(params, rng.normal(size=6))
            assert np.all(np.isfinite(logits))
            assert np.all(penult >= 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            forward(zero_params(d=3), [1.0, 2.0])

    def test_batch_agrees_with_single(self):
        # BLAS may reduce in a different order per batch size, so agreement
        # is to float64 roundoff, not bitwise.
        rng = np.random.default_rng(1)
        params = random_params(rng, 5, (7,), 4, 3)
        x = rng.normal(size=(6, 5))
        logits_b, penult_b = forward_batch(params, x)
        for i in range(6):
            logits, penult = forward(params, x[i])
            assert np.allclose(logits_b[i], logits, rtol=1e-12, atol=1e-15)
            assert np.allclose(penult_b[i], penult, rtol=1e-12, atol=1e-15)


class TestLossAndGradient:
    def test_uniform_logits_one_hot_loss_is_log_c(self):
        params = zero_params(d=3, p=2, c=4)
        x = np.random.default_rng(2).normal(size=(5, 3))
        loss, _ = loss_and_gradient(params, x, smooth_targets([0, 1, 2, 3, 0], 4, 0.0))
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_uniform_logits_smoothed_loss_is_log_c(self):
        params = zero_params(d=3, p=2, c=4)
        x = np.random.default_rng(3).normal(size=(5, 3))
        loss, _ = loss_and_gradient(params, x, smooth_targets([0, 1, 2, 3, 0], 4, 0.37))
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        params = random_params(rng, 5, (7,), 4, 3)
        x = rng.normal(size=(6, 5))
        t = smooth_targets(rng.integers(0, 3, size=6), 3, 0.1)
        assert max_gradient_error(params, x, t) < 1e-4

    def test_loss_decomposition(self):
        rng = np.random.default_rng(5)
        params = random_params(rng, 4, (6,), 3, 5)
        x = rng.normal(size=(8, 4))
        labels = rng.integers(0, 5, size=8)
        eps = 0.3
        loss_ls, _ = loss_and_gradient(params, x, smooth_targets(labels, 5, eps))
        loss_hot, _ = loss_and_gradient(params, x, smooth_targets(labels, 5, 0.0))
        loss_uni, _ = loss_and_gradient(params, x, np.full((8, 5), 1.0 / 5))
        assert loss_ls == pytest.approx((1 - eps) * loss_hot + eps * loss_uni, abs=1e-10)

    def test_batch_order_invariance(self):
        rng = np.random.default_rng(6)
        params = random_params(rng, 4, (5,), 3, 2)
        x = rng.normal(size=(10, 4))
        t = smooth_targets(rng.integers(0, 2, size=10), 2, 0.1)
        perm = rng.permutation(10)
        loss1, g1 = loss_and_gradient(params, x, t)
        loss2, g2 = loss_and_gradient(params, x[perm], t[perm])
        assert loss1 == pytest.approx(loss2, abs=1e-12)
        for a, b in zip(g1.weights + g1.biases, g2.weights + g2.biases):
            assert np.max(np.abs(a - b)) < 1e-12

    def test_shape_mismatch(self):
        params = zero_params()
        with pytest.raises(DimensionMismatch):
            loss_and_gradient(params, np.ones((2, 3)), np.ones((3, 2)))


def max_gradient_error(params, x, t, h=1e-5):
    """Central finite differences on every coordinate; relative error with an
    absolute floor of 1e-8 for near-zero coordinates."""
    _, grads = loss_and_gradient(params, x, t)
    worst = 0.0
    arrays = list(params.weights) + list(params.biases)
    grad_arrays = list(grads.weights) + list(grads.biases)
    for slot, (arr, grad) in enumerate(zip(arrays, grad_arrays)):
        flat = arr.copy().ravel()
        for j in range(flat.size):
            for sign in (+1.0, -1.0):
                bumped = [a.copy() for a in arrays]
                bumped[slot].ravel()[j] = flat[j] + sign * h
                k = len(params.weights)
                p2 = ClassifierParams(
                    weights=tuple(bumped[:k]), biases=tuple(bumped[k:])
                )
                if sign > 0:
                    up, _ = loss_and_gradient(p2, x, t)
                else:
                    down, _ = loss_and_gradient(p2, x, t)
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), abs(grad.ravel()[j]), 1e-8)
            worst = max(worst, abs(numeric - grad.ravel()[j]) / denom)
    return worst


class TestTrain:
    def test_separable_blobs_high_accuracy(self):
        ds = blob_dataset()
        cfg = TrainConfig(epsilon=0.0, seed=1)
        params = train(ds.inputs, ds.labels, 2, cfg)
        logits, _ = forward_batch(params, ds.inputs)
        assert id_accuracy(logits, ds.labels) >= 0.99

    def test_smoothing_keeps_accuracy_close(self):
        ds = blob_dataset()
        acc = {}
        for eps in (0.0, 0.1):
            params = train(ds.inputs, ds.labels, 2, TrainConfig(epsilon=eps, seed=1))
            logits, _ = forward_batch(params, ds.inputs)
            acc[eps] = id_accuracy(logits, ds.labels)
        assert abs(acc[0.0] - acc[0.1]) <= 0.02

    def test_loss_decreases(self):
        ds = blob_dataset(seed=9)
        cfg = TrainConfig(epsilon=0.0, seed=2, epochs=10)
        targets = smooth_targets(ds.labels, 2, 0.0)
        init = init_params((4, 64, 16, 2), RngState(cfg.seed).child(0))
        loss_before, _ = loss_and_gradient(init, ds.inputs, targets)
        params = train(ds.inputs, ds.labels, 2, cfg)
        loss_after, _ = loss_and_gradient(params, ds.inputs, targets)
        assert loss_after <= loss_before

    def test_deterministic_for_fixed_seed(self):
        ds = blob_dataset()
        cfg = TrainConfig(epsilon=0.1, seed=7, epochs=5)
        p1 = train(ds.inputs, ds.labels, 2, cfg)
        p2 = train(ds.inputs, ds.labels, 2, cfg)
        for a, b in zip(p1.weights + p1.biases, p2.weights + p2.biases):
            assert np.array_equal(a, b)

    def test_divergence_raises_nonfinite_loss(self):
        ds = blob_dataset()
        cfg = TrainConfig(epsilon=0.0, seed=1, epochs=5, learning_rate=1e200)
        with np.errstate(invalid="ignore", over="ignore"):
            with pytest.raises(NonFiniteLoss) as info:
                train(ds.inputs, ds.labels, 2, cfg)
        assert info.value.epoch is not None

    def test_early_stop_flag_runs(self):
        ds = blob_dataset()
        cfg = TrainConfig(epsilon=0.0, seed=3, epochs=6, early_stop_fraction=0.2)
        params = train(ds.inputs, ds.labels, 2, cfg)
        logits, _ = forward_batch(params, ds.inputs)
        assert id_accuracy(logits, ds.labels) > 0.9

    def test_config_validation(self):
        with pytest.raises(EpsilonOutOfRange):
            TrainConfig(epsilon=1.0)
        with pytest.raises(ConfigInvalid):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigInvalid):
            TrainConfig(schedule="linear")


class TestExtractFeatures:
    def test_zero_net_zero_features(self):
        fs = extract_features(zero_params(), np.ones((3, 3)), [0, 1, 0], 2, "baseline")
        assert np.array_equal(fs.features, np.zeros((3, 2)))
        assert fs.source_tag == "baseline"

    def test_golden_penultimate(self):
        fs = extract_features(golden_params(), np.array([[1.0, 2.0]]), [0], 2)
        assert fs.features[0] == pytest.approx([0.0, 0.8], abs=1e-15)

    def test_matches_forward_row_by_row(self):
        rng = np.random.default_rng(8)
        params = random_params(rng, 5, (6,), 4, 3)
        x = rng.normal(size=(7, 5))
        fs = extract_features(params, x, rng.integers(0, 3, size=7), 3)
        for i in range(7):
            _, penult = forward(params, x[i])
            assert np.allclose(fs.features[i], penult, rtol=1e-12, atol=1e-15)


class TestParamsSerialization:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        params = random_params(rng, 5, (6,), 4, 3)
        path = tmp_path / "params.txt"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded.layer_sizes == params.layer_sizes
        for a, b in zip(
            params.weights + params.biases, loaded.weights + loaded.biases
        ):
            assert np.array_equal(a, b)

    def test_rewrite_byte_identical(self, tmp_path):
        rng = np.random.default_rng(10)
        params = random_params(rng, 3, (), 2, 2)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_params(params, p1)
        save_params(load_params(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
