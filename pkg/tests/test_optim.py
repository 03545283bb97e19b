import math

import numpy as np
import pytest

from modules.errors import ConfigError, ShapeError
from modules.networks import Network
from modules.optim import adam_init, adam_step
from modules.tensor import Tensor


def _net(values) -> Network:
    w = Tensor(np.asarray(values, dtype=np.float32), requires_grad=True, name="w")
    return Network("generator", [], {"w": w})


def test_first_steps_move_by_learning_rate() -> None:
    net = _net([1.0, -2.0, 0.5])
    opt = adam_init(net, lr=0.01)
    grad = np.array([0.5, -3.0, 2.0], dtype=np.float32)
    for step in (1, 2):
        net.params["w"].grad = grad.copy()
        adam_step(opt, net)
        assert opt.t == step
    expected = np.array([1.0, -2.0, 0.5]) - 2 * 0.01 * np.sign(grad)
    np.testing.assert_allclose(net.params["w"].data, expected, rtol=1e-5)


def test_moments_are_kept_per_parameter() -> None:
    net = _net([0.0, 0.0])
    opt = adam_init(net, lr=0.1)
    net.params["w"].grad = np.array([1.0, 0.0], dtype=np.float32)
    adam_step(opt, net)
    np.testing.assert_allclose(opt.m["w"], [0.5, 0.0])
    np.testing.assert_allclose(opt.v["w"], [0.001, 0.0], rtol=1e-5)
    assert net.params["w"].data[1] == 0.0


def test_missing_gradient_and_bad_lr() -> None:
    net = _net([1.0])
    opt = adam_init(net, lr=0.1)
    with pytest.raises(ShapeError):
        adam_step(opt, net)
    assert opt.t == 0
    with pytest.raises(ConfigError):
        adam_init(net, lr=0.0)


def _scalar_adam(theta: float, lr: float, steps: int) -> list[float]:
    """Adam scalaire écrit à la main sur f(θ) = θ²."""
    b1, b2, eps = 0.5, 0.999, 1e-8
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        path.append(theta)
    return path


def _quadratic_path(lr: float, steps: int) -> list[float]:
    net = _net64([1.0])
    opt = adam_init(net, lr=lr)
    path = []
    for _ in range(steps):
        w = net.params["w"]
        w.grad = 2.0 * w.data
        adam_step(opt, net)
        path.append(float(w.data[0]))
    return path


def _net64(values) -> Network:
    w = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, name="w")
    return Network("generator", [], {"w": w})


def test_quadratic_descent_matches_scalar_oracle() -> None:
    path = _quadratic_path(1e-3, 2000)
    np.testing.assert_allclose(path, _scalar_adam(1.0, 1e-3, 2000), rtol=1e-12, atol=1e-15)
    assert all(b < a for a, b in zip(path, path[1:]))
    assert 0.0 < path[-1] < 0.1


def test_quadratic_converges_within_two_thousand_steps() -> None:
    path = _quadratic_path(1e-2, 2000)
    np.testing.assert_allclose(path, _scalar_adam(1.0, 1e-2, 2000), rtol=1e-9, atol=1e-12)
    assert min(abs(p) for p in path) < 1e-2
    assert abs(path[-1]) < 1e-2


def test_zero_gradient_leaves_parameters_unchanged() -> None:
    values = np.random.default_rng(0).normal(size=5)
    net = _net64(values)
    opt = adam_init(net, lr=2e-4)
    for _ in range(3):
        net.params["w"].grad = np.zeros(5)
        adam_step(opt, net)
    np.testing.assert_array_equal(net.params["w"].data, values)
    assert opt.t == 3


def test_identical_runs_are_bit_identical() -> None:
    def run() -> np.ndarray:
        net = _net([0.3, -0.7, 1.1, 0.0])
        opt = adam_init(net, lr=1e-4)
        grads = np.random.default_rng(42).normal(size=(25, 4)).astype(np.float32)
        for g in grads:
            net.params["w"].grad = g
            adam_step(opt, net)
        return net.params["w"].data

    assert run().tobytes() == run().tobytes()
