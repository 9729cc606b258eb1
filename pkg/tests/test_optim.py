"""Adam update rule and the learning-rate schedule."""

import numpy as np
import pytest

from meim.errors import ConfigError, ShapeError
from meim.optim import Adam, LrSchedule, lr_at
from meim.tensor import Tensor


class TestAdamStep:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        Adam().step([("p", p)], [np.zeros(2)], lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude_is_learning_rate(self):
        p = Tensor([1.0], requires_grad=True)
        Adam().step([("p", p)], [np.array([0.5])], lr=0.1)
        # bias-corrected first step moves by ~lr regardless of gradient scale
        assert p.data[0] == pytest.approx(0.9, abs=1e-7)

    def test_hand_computed_first_step(self):
        opt = Adam(beta1=0.9, beta2=0.999, eps=1e-8)
        p = Tensor([1.0], requires_grad=True)
        g = 0.5
        opt.step([("p", p)], [np.array([g])], lr=0.1)
        m_hat = ((1 - 0.9) * g) / (1 - 0.9)
        v_hat = ((1 - 0.999) * g * g) / (1 - 0.999)
        expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-14)

    def test_equal_gradients_update_identically(self):
        a = Tensor([2.0], requires_grad=True)
        b = Tensor([2.0], requires_grad=True)
        opt = Adam()
        for _ in range(5):
            opt.step([("a", a), ("b", b)], [np.array([0.3]), np.array([0.3])], lr=0.05)
        assert a.data[0] == b.data[0]

    def test_per_parameter_independence(self):
        # updating x alone equals updating x inside a larger parameter set
        x1 = Tensor([1.0], requires_grad=True)
        opt1 = Adam()
        x2 = Tensor([1.0], requires_grad=True)
        y2 = Tensor([5.0], requires_grad=True)
        opt2 = Adam()
        for step in range(4):
            g = np.array([0.1 * (step + 1)])
            opt1.step([("x", x1)], [g.copy()], lr=0.01)
            opt2.step([("x", x2), ("y", y2)], [g.copy(), np.array([1.0])], lr=0.01)
        assert x1.data[0] == x2.data[0]

    def test_quadratic_convergence(self):
        x = Tensor([5.0], requires_grad=True)
        opt = Adam()
        for _ in range(2000):
            opt.step([("x", x)], [2.0 * x.data], lr=0.05)
        assert abs(x.data[0]) < 1e-2

    def test_deterministic_trajectory(self):
        def run():
            x = Tensor([1.5], requires_grad=True)
            opt = Adam()
            history = []
            for i in range(50):
                opt.step([("x", x)], [np.cos(x.data) + i], lr=0.01)
                history.append(float(x.data[0]))
            return history

        assert run() == run()

    def test_shape_mismatch_rejected(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            Adam().step([("p", p)], [np.zeros(3)], lr=0.1)

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ConfigError):
            Adam().step([], [], lr=0.0)


class TestLrSchedule:
    def test_epoch_zero_is_base(self):
        assert lr_at(LrSchedule(3e-3, 0.995), 0) == 3e-3

    def test_no_decay_is_constant(self):
        s = LrSchedule(1e-2, 1.0)
        assert lr_at(s, 500) == 1e-2

    def test_two_epochs_of_decay(self):
        assert lr_at(LrSchedule(3e-3, 0.995), 2) == pytest.approx(2.970075e-3, rel=1e-9)

    def test_validation(self):
        with pytest.raises(ConfigError):
            LrSchedule(0.0, 0.9)
        with pytest.raises(ConfigError):
            LrSchedule(1e-3, 0.0)
        with pytest.raises(ConfigError):
            lr_at(LrSchedule(1e-3, 0.9), -1)
