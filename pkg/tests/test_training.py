import math

import numpy as np
import pytest

from wpal.data import SyntheticSample
from wpal.layers import PyramidSpec, fspp_forward
from wpal.model import build, forward
from wpal.tensor import ShapeError, Tensor
from wpal.training import (
    NumericError,
    TrainConfig,
    cross_entropy,
    grad_check,
    positive_proportions,
    train,
    train_config_from_text,
    train_config_to_text,
    weighted_cross_entropy,
)

from conftest import fd_gradient, max_rel_err
from test_model import tiny_config


class TestPositiveProportions:
    def test_direct_count(self):
        w = positive_proportions([[1], [0], [0], [0]])
        np.testing.assert_allclose(w.w, [0.25])

    def test_all_positive_clamped(self):
        w = positive_proportions([[1], [1], [1]])
        np.testing.assert_allclose(w.w, [1.0 - 1e-3])

    def test_balanced(self):
        w = positive_proportions([[1, 0], [0, 1]])
        np.testing.assert_allclose(w.w, [0.5, 0.5])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            positive_proportions(np.zeros((0, 3)))


class TestLosses:
    def test_perfect_prediction_near_zero(self):
        assert cross_entropy([1.0], Tensor([1.0 - 1e-12])).item() == pytest.approx(0.0, abs=1e-9)

    def test_half_prediction_is_ln2(self):
        assert cross_entropy([1.0], Tensor([0.5])).item() == pytest.approx(math.log(2), rel=1e-12)

    def test_negative_label_symmetric(self):
        assert cross_entropy([0.0], Tensor([0.5])).item() == pytest.approx(math.log(2), rel=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="label shape"):
            cross_entropy([1.0, 0.0], Tensor([0.5]))

    def test_weighted_reduces_to_plain_at_half(self, rng):
        p = rng.integers(0, 2, 12).astype(float)
        ph = Tensor(rng.uniform(0.05, 0.95, 12))
        w = np.full(12, 0.5)
        assert weighted_cross_entropy(p, ph, w).item() == pytest.approx(
            cross_entropy(p, ph).item(), abs=1e-12
        )

    def test_weighted_hand_value(self):
        loss = weighted_cross_entropy([1.0], Tensor([0.5]), np.array([0.1]))
        assert loss.item() == pytest.approx(math.log(2) / 0.2, abs=1e-9)

    def test_weighted_near_perfect_is_near_zero(self):
        loss = weighted_cross_entropy([1.0], Tensor([1.0 - 1e-12]), np.array([0.3]))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_nonnegative_for_random_inputs(self, rng):
        for _ in range(50):
            p = rng.integers(0, 2, 6).astype(float)
            ph = Tensor(rng.uniform(1e-6, 1 - 1e-6, 6))
            w = rng.uniform(0.01, 0.99, 6)
            assert cross_entropy(p, ph).item() >= 0.0
            assert weighted_cross_entropy(p, ph, w).item() >= 0.0

    def test_positive_coefficient_grows_as_w_shrinks(self):
        values = [
            weighted_cross_entropy([1.0], Tensor([0.5]), np.array([w])).item()
            for w in (0.5, 0.1, 0.01)
        ]
        assert values[0] < values[1] < values[2]

    def test_gradient_matches_finite_differences(self, rng):
        p = rng.integers(0, 2, 8).astype(float)
        ph_data = rng.uniform(0.1, 0.9, 8)
        w = rng.uniform(0.05, 0.95, 8)
        for loss_fn in (lambda t: cross_entropy(p, t), lambda t: weighted_cross_entropy(p, t, w)):
            ph = Tensor(ph_data.copy(), requires_grad=True)
            loss_fn(ph).backward()
            g = ph.grad.copy()
            fd = fd_gradient(lambda: loss_fn(Tensor(ph.data)).item(), ph.data)
            assert max_rel_err(g, fd) < 1e-6


def _separable_samples(rng, count=100, size=(24, 16)):
    h, w = size
    samples = []
    for _ in range(count):
        img = rng.uniform(0.0, 0.2, (3, h, w))
        label = int(rng.random() < 0.5)
        if label:
            y = int(rng.integers(2, h - 8))
            x = int(rng.integers(2, w - 8))
            img[:, y : y + 6, x : x + 6] = 0.95
        samples.append(SyntheticSample(img, np.array([label], dtype=np.int64)))
    return samples


class TestTrainLoop:
    def test_zero_learning_rate_leaves_parameters_bit_identical(self, rng):
        samples = _separable_samples(rng, count=6)
        state = build(tiny_config(num_attributes=1))
        before = {n: t.data.copy() for n, t in state.params.items()}
        cfg = TrainConfig(learning_rate=0.0, epochs=1, batch_size=3, seed=1)
        train(state, samples, cfg)
        for n, t in state.params.items():
            np.testing.assert_array_equal(t.data, before[n])

    def test_same_seed_identical_loss_logs(self, rng):
        samples = _separable_samples(rng, count=10)
        cfg = TrainConfig(learning_rate=0.05, epochs=3, batch_size=4, seed=9)
        _, logs_a, _ = train(build(tiny_config(num_attributes=1)), samples, cfg)
        _, logs_b, _ = train(build(tiny_config(num_attributes=1)), samples, cfg)
        assert [(e.epoch, e.mean_loss, e.ma_train) for e in logs_a] == [
            (e.epoch, e.mean_loss, e.ma_train) for e in logs_b
        ]

    def test_separable_attribute_converges(self, rng):
        samples = _separable_samples(rng, count=100)
        cfg = TrainConfig(learning_rate=0.05, epochs=30, batch_size=10, seed=3)
        _, logs, _ = train(build(tiny_config(num_attributes=1)), samples, cfg)
        assert logs[-1].mean_loss < 0.1

    def test_resume_replays_identically(self, rng):
        samples = _separable_samples(rng, count=12)
        cfg = TrainConfig(learning_rate=0.05, epochs=4, batch_size=4, seed=5)
        straight, _, _ = train(build(tiny_config(num_attributes=1)), samples, cfg)

        half = TrainConfig(learning_rate=0.05, epochs=2, batch_size=4, seed=5)
        state, _, velocity = train(build(tiny_config(num_attributes=1)), samples, half)
        resumed, _, _ = train(state, samples, cfg, start_epoch=2, velocity=velocity)
        for n in straight.params:
            np.testing.assert_array_equal(resumed.params[n].data, straight.params[n].data)

    def test_non_finite_loss_aborts_with_batch_index(self, rng):
        samples = _separable_samples(rng, count=4)
        state = build(tiny_config(num_attributes=1))
        state.params["fc.bias"].data[:] = np.nan
        cfg = TrainConfig(epochs=1, batch_size=2, seed=0)
        with pytest.raises(NumericError, match="batch 0"):
            train(state, samples, cfg)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train(build(tiny_config()), [], TrainConfig())

    def test_config_text_round_trip(self):
        cfg = TrainConfig(learning_rate=0.01, momentum=0.8, weight_decay=1e-4,
                          epochs=7, batch_size=5, seed=42, weighted_loss=False)
        assert train_config_from_text(train_config_to_text(cfg)) == cfg

    def test_config_validation(self):
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError, match="learning_rate"):
            TrainConfig(learning_rate=-0.1)


class TestGradCheck:
    def test_fspp_layer_passes(self, rng):
        x = Tensor(rng.uniform(-2, 2, (2, 6, 6)), requires_grad=True)
        spec = PyramidSpec.two_level(3, 3)
        proj = rng.uniform(0.5, 1.5, 20)
        report = grad_check(lambda: (fspp_forward(x, spec).scores * proj).sum(),
                            {"input": x}, tolerance=1e-5)
        assert report.passed
        assert [e.name for e in report.entries] == ["input"]

    def test_frozen_parameter_excluded(self, rng):
        x = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        frozen = Tensor(rng.uniform(-1, 1, 4))
        report = grad_check(lambda: (x * frozen).sum(), {"x": x, "frozen": frozen})
        assert [e.name for e in report.entries] == ["x"]

    def test_corrupted_backward_rule_fails(self, rng):
        x = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)

        def broken_square(t):
            out_data = t.data**2

            def bw(g):
                t.accumulate_grad(g * 3.0 * t.data)  # wrong rule on purpose

            return Tensor._from_op(out_data, (t,), "broken", bw)

        report = grad_check(lambda: broken_square(x).sum(), {"x": x}, tolerance=1e-5)
        assert not report.passed
        assert "FAIL" in report.format_table()

    def test_end_to_end_tiny_model(self, rng):
        state = build(tiny_config(seed=2))
        img = Tensor(rng.uniform(0, 1, (3, 16, 16)), requires_grad=True)
        proj = rng.uniform(0.5, 1.5, 2)
        leaves = dict(state.params)
        leaves["image"] = img
        report = grad_check(lambda: (forward(state, img).prediction * proj).sum(),
                            leaves, tolerance=1e-4)
        assert report.passed
