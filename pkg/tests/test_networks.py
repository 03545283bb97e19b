import numpy as np
import pytest

from modules.errors import ConfigError, ShapeError
from modules.networks import (
    GeneratorConfig,
    build_discriminator,
    build_generator,
    build_segmenter,
)
from modules.rng import stream
from modules.optim import adam_init, adam_step
from modules.tensor import Tape, Tensor, backward, mean

TINY_G = GeneratorConfig(1, 1, base_filters=4, n_res_blocks=1)


def _x(size: int = 16, n: int = 2) -> Tensor:
    rng = np.random.default_rng(0)
    return Tensor(rng.uniform(-1, 1, size=(n, 1, size, size)).astype(np.float32))


def test_generator_keeps_shape_and_range() -> None:
    g = build_generator(TINY_G, stream(0, "init.G1"))
    out = g(_x())
    assert out.shape == (2, 1, 16, 16)
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0


def test_segmenter_outputs_log_probabilities() -> None:
    seg = build_segmenter(GeneratorConfig(1, 3, 4, 1), stream(0, "init.Seg"))
    out = seg(_x())
    assert out.shape == (2, 3, 16, 16)
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, rtol=1e-5)


def test_discriminator_patch_grid() -> None:
    d = build_discriminator(4, 2, stream(0, "init.D1"))
    assert d(_x()).shape == (2, 1, 2, 2)
    d1 = build_discriminator(4, 1, stream(0, "init.D1"))
    assert d1(_x()).shape == (2, 1, 6, 6)


def test_size_not_multiple_of_four_is_rejected() -> None:
    g = build_generator(TINY_G, stream(0, "init.G1"))
    with pytest.raises(ShapeError):
        g(_x(size=18))
    with pytest.raises(ShapeError):
        g(Tensor(np.zeros((1, 2, 16, 16), dtype=np.float32)))


def test_segmenter_needs_two_classes() -> None:
    with pytest.raises(ConfigError):
        build_segmenter(GeneratorConfig(1, 1, 4, 1), stream(0, "init.Seg"))


def test_same_stream_same_weights() -> None:
    a = build_generator(TINY_G, stream(5, "init.G1"))
    b = build_generator(TINY_G, stream(5, "init.G1"))
    c = build_generator(TINY_G, stream(5, "init.G2"))
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_parameter_names_are_stable() -> None:
    g = build_generator(TINY_G, stream(0, "init.G1"))
    names = [n for n, _ in g.named_parameters()]
    assert names[0] == "stem.conv.weight"
    assert "res1.norm1.gamma" in names
    assert names[-1] == "head.conv.bias"


def test_state_dict_round_trip() -> None:
    a = build_generator(TINY_G, stream(1, "init.G1"))
    b = build_generator(TINY_G, stream(2, "init.G1"))
    b.load_state_dict(a.state_dict())
    assert a.checksum() == b.checksum()
    bad = dict(a.state_dict())
    bad.pop("head.conv.bias")
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)


def test_frozen_blocks_gradients() -> None:
    d = build_discriminator(4, 1, stream(0, "init.D1"))
    g = build_generator(TINY_G, stream(0, "init.G1"))
    with d.frozen(), Tape():
        backward(mean(d(g(_x()))))
    assert all(p.grad is None for _, p in d.named_parameters())
    assert all(p.grad is not None for _, p in g.named_parameters())
    assert all(p.requires_grad for _, p in d.named_parameters())


def _conv_count(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def _resnet_count(cin: int, cout: int, nf: int, blocks: int) -> int:
    norm = 2
    total = _conv_count(cin, nf, 7) + norm * nf
    total += _conv_count(nf, 2 * nf, 3) + norm * 2 * nf
    total += _conv_count(2 * nf, 4 * nf, 3) + norm * 4 * nf
    total += blocks * 2 * (_conv_count(4 * nf, 4 * nf, 3) + norm * 4 * nf)
    total += _conv_count(4 * nf, 2 * nf, 3) + norm * 2 * nf
    total += _conv_count(2 * nf, nf, 3) + norm * nf
    return total + _conv_count(nf, cout, 7)


def test_full_scale_generator_parameter_count() -> None:
    g = build_generator(GeneratorConfig(1, 1, 64, 9), stream(0, "init.G1"))
    assert g.num_parameters() == _resnet_count(1, 1, 64, 9) == 11_376_129
    seg = build_segmenter(GeneratorConfig(1, 7, 16, 3), stream(0, "init.Seg"))
    assert seg.num_parameters() == _resnet_count(1, 7, 16, 3)


def test_discriminator_grid_at_full_resolution() -> None:
    d = build_discriminator(4, 3, stream(0, "init.D1"))
    x = Tensor(np.zeros((1, 1, 256, 256), dtype=np.float32))
    assert d(x).shape == (1, 1, 30, 30)


def test_instance_norm_scale_and_shift_are_trained() -> None:
    g = build_generator(TINY_G, stream(0, "init.G1"))
    gamma, beta = g.params["stem.norm.gamma"], g.params["stem.norm.beta"]
    np.testing.assert_array_equal(gamma.data, np.ones(4))
    np.testing.assert_array_equal(beta.data, np.zeros(4))
    with Tape():
        backward(mean(g(_x())))
    assert gamma.grad is not None and beta.grad is not None
    adam_step(adam_init(g, 1e-3), g)
    assert not np.array_equal(gamma.data, np.ones(4))
