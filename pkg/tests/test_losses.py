import math

import numpy as np
import pytest

from modules.errors import ConfigError, ShapeError
from modules.losses import (
    LossParts,
    LossWeights,
    cycle_loss,
    gan_loss_discriminator,
    gan_loss_generator,
    seg_loss,
    total_loss,
)
from modules.tensor import Tensor, log_softmax


def test_discriminator_loss_at_zero_logits_is_two_ln2() -> None:
    zeros = Tensor(np.zeros((2, 1, 3, 3), dtype=np.float64))
    assert math.isclose(gan_loss_discriminator(zeros, zeros).item(), 2 * math.log(2), rel_tol=1e-12)
    assert math.isclose(gan_loss_generator(zeros).item(), math.log(2), rel_tol=1e-12)


def test_least_squares_form() -> None:
    ones = Tensor(np.ones((1, 1, 2, 2)))
    zeros = Tensor(np.zeros((1, 1, 2, 2)))
    assert gan_loss_discriminator(ones, zeros, "least_squares").item() == 0.0
    assert gan_loss_generator(zeros, "least_squares").item() == 1.0
    with pytest.raises(ConfigError):
        gan_loss_generator(zeros, "hinge")


def test_cycle_loss_is_mean_absolute_error() -> None:
    a = Tensor(np.zeros((1, 1, 2, 2)))
    b = Tensor(np.array([[[[1.0, -1.0], [0.0, 2.0]]]]))
    assert cycle_loss(a, a).item() == 0.0
    assert cycle_loss(b, a).item() == 1.0


def test_seg_loss_perfect_and_uniform() -> None:
    labels = np.array([[[0, 1], [1, 0]]])
    onehot = (labels[:, None] == np.arange(2)[None, :, None, None]).astype(np.float64)
    perfect = log_softmax(Tensor(60.0 * onehot))
    assert seg_loss(perfect, labels).item() < 1e-12
    uniform = Tensor(np.full((1, 3, 2, 2), math.log(1 / 3)))
    assert math.isclose(seg_loss(uniform, np.zeros((1, 2, 2), dtype=int)).item(), math.log(3),
                        rel_tol=1e-12)


def test_seg_loss_class_weights() -> None:
    labels = np.array([[[0, 1], [1, 1]]])
    uniform = Tensor(np.full((1, 2, 2, 2), math.log(0.5)))
    weighted = seg_loss(uniform, labels, [1.0, 3.0]).item()
    assert math.isclose(weighted, (1 + 3 * 3) / 4 * math.log(2), rel_tol=1e-12)
    with pytest.raises(ShapeError):
        seg_loss(uniform, np.array([[[0, 2], [1, 1]]]))


def test_total_loss_is_weighted_sum() -> None:
    parts = LossParts(*(Tensor(np.float64(v)) for v in (0.5, 0.25, 0.1, 0.2, 0.7)))
    w = LossWeights(1.0, 2.0, 10.0, 10.0, 3.0)
    expected = 0.5 + 2 * 0.25 + 10 * 0.1 + 10 * 0.2 + 3 * 0.7
    assert math.isclose(total_loss(parts, w).item(), expected, rel_tol=1e-12)
    doubled = LossWeights(*(2 * x for x in w.as_tuple()))
    assert math.isclose(total_loss(parts, doubled).item(), 2 * expected, rel_tol=1e-12)


def test_total_loss_skips_absent_terms() -> None:
    parts = LossParts(gan_g1=Tensor(np.float64(0.5)), seg=Tensor(np.float64(2.0)))
    assert total_loss(parts, LossWeights()).item() == 2.5
    assert parts.as_floats()["cycle_s"] == 0.0
    assert total_loss(LossParts(), LossWeights()).item() == 0.0


def test_negative_weight_rejected() -> None:
    with pytest.raises(ConfigError):
        LossWeights(lambda3=-1.0)
