import math

import numpy as np
import pytest

from fednas.losses import cross_entropy
from fednas.optim import AdamState, SgdMomentumState, adam_step, cosine_lr, sgd_momentum_step

from helpers import check_cross_entropy_gradient


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((4, 10)), np.array([0, 3, 7, 9]))
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_confident_logits_loss_vanishes(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 50.0
        loss, _ = cross_entropy(logits, np.array([2]))
        assert loss < 1e-12

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(8, 6))
        _, grad = cross_entropy(logits, rng.integers(0, 6, 8))
        assert np.abs(grad.sum(axis=1)).max() < 1e-12

    def test_grad_matches_finite_differences(self):
        for seed in range(10):
            assert check_cross_entropy_gradient(seed) < 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))


class TestSgdMomentum:
    def test_zero_grad_no_motion(self):
        params = {"w": np.array([1.0, 2.0])}
        state = SgdMomentumState(momentum=0.9, weight_decay=0.0)
        sgd_momentum_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(params["w"], np.array([1.0, 2.0]))

    def test_one_step_arithmetic(self):
        params = {"w": np.array([1.0])}
        state = SgdMomentumState(momentum=0.9, weight_decay=0.0)
        sgd_momentum_step(params, {"w": np.array([1.0])}, state, lr=0.1)
        assert params["w"][0] == pytest.approx(0.9)
        assert state.velocity["w"][0] == pytest.approx(1.0)

    def test_decay_only(self):
        params = {"w": np.array([1.0])}
        state = SgdMomentumState(momentum=0.9, weight_decay=3e-4)
        sgd_momentum_step(params, {"w": np.zeros(1)}, state, lr=0.1)
        assert params["w"][0] == pytest.approx(1.0 - 0.1 * 3e-4, abs=1e-15)

    def test_untouched_keys_stay(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        state = SgdMomentumState()
        sgd_momentum_step(params, {"a": np.ones(2)}, state, lr=0.5)
        assert np.array_equal(params["b"], np.ones(2))


class TestAdam:
    def test_zero_grads_no_motion(self):
        params = {"a": np.array([2.0])}
        state = AdamState()
        for _ in range(5):
            adam_step(params, {"a": np.zeros(1)}, state, lr=1e-3)
        assert params["a"][0] == pytest.approx(2.0)

    def test_first_step_is_minus_lr(self):
        params = {"a": np.array([0.0])}
        adam_step(params, {"a": np.array([1.0])}, AdamState(), lr=1e-3)
        # bias correction is exact at t=1, update = -lr * g/|g|
        assert params["a"][0] == pytest.approx(-1e-3, rel=1e-6)

    def test_matches_straight_line_oracle(self):
        # independent scalar Adam, written out longhand
        rng = np.random.default_rng(42)
        grads = rng.normal(size=10)
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-3
        w = 0.5
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        params = {"a": np.array([0.5])}
        state = AdamState(betas=(b1, b2), eps=eps)
        for g in grads:
            adam_step(params, {"a": np.array([g])}, state, lr=lr)
        assert abs(params["a"][0] - w) < 1e-12

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(1)
        grads = [rng.normal(size=3) for _ in range(4)]

        def run():
            params = {"a": np.linspace(0, 1, 3)}
            state = AdamState()
            for g in grads:
                adam_step(params, {"a": g}, state, lr=2e-3)
            return params["a"]

        assert np.array_equal(run(), run())


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 10, 0.05) == pytest.approx(0.05)
        assert cosine_lr(10, 10, 0.05) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(5, 10, 0.05) == pytest.approx(0.025)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0.05)
        with pytest.raises(ValueError):
            cosine_lr(0, 0, 0.05)
