import numpy as np
import pytest
from scipy.stats import chisquare

from modules.data import (
    PGM_MAXVAL,
    DatasetReader,
    IntensityImage,
    LabelMap,
    Modality,
    SlicePool,
    decode_pgm,
    encode_pgm,
    normalize,
    normalize_hu,
    normalize_percentile,
    read_image_pgm,
    resample_bilinear,
    resample_nearest,
    unpaired_sampler,
    write_image_pgm,
)
from modules.errors import DataError, ShapeError
from modules.rng import stream


def test_percentile_normalisation_saturates_tails() -> None:
    vol = np.arange(201, dtype=np.float32).reshape(1, 3, 67)
    out = normalize_percentile(vol)
    assert out.min() == 0.0 and out.max() == 1.0
    assert out.dtype == np.float32
    lo, hi = np.percentile(vol, [2.5, 97.5])
    assert out.flat[0] == 0.0 and out.flat[-1] == 1.0
    assert abs(out.flat[100] - (100 - lo) / (hi - lo)) < 1e-6


def test_constant_volume_maps_to_half() -> None:
    out = normalize_percentile(np.full((2, 4, 4), 7.0))
    assert np.all(out == 0.5)


def test_hu_window() -> None:
    out = normalize_hu(np.array([-3000.0, -1000.0, 0.0, 1000.0, 2500.0]))
    np.testing.assert_allclose(out, [0.0, 0.0, 0.5, 1.0, 1.0])
    np.testing.assert_allclose(normalize(np.array([0.0]), "ct"), [0.5])
    with pytest.raises(ShapeError):
        normalize(np.zeros(3), "pet")


def test_bilinear_center_value() -> None:
    img = IntensityImage(np.array([[0.0, 1 / 3], [2 / 3, 1.0]]), Modality.SOURCE)
    out = resample_bilinear(img, 3, 3)
    assert abs(out.pixels[1, 1] - 0.5) < 1e-6
    assert out.pixels[0, 0] == 0.0 and out.pixels[2, 2] == 1.0
    assert out.spacing_mm == pytest.approx((2 / 3, 2 / 3))


def test_bilinear_constant_and_identity() -> None:
    value = np.float32(0.37)
    img = IntensityImage(np.full((5, 7), value), Modality.TARGET)
    assert np.all(resample_bilinear(img, 9, 4).pixels == value)
    same = resample_bilinear(img, 5, 7)
    assert same.pixels is not img.pixels
    np.testing.assert_array_equal(same.pixels, img.pixels)
    with pytest.raises(ShapeError):
        resample_bilinear(img, 1, 4)


def test_nearest_upsamples_checkerboard_without_new_classes() -> None:
    checker = LabelMap(np.array([[0, 1], [1, 0]]), 2)
    out = resample_nearest(checker, 4, 4)
    np.testing.assert_array_equal(out.classes, np.kron(checker.classes, np.ones((2, 2), int)))
    labels = LabelMap(np.random.default_rng(0).integers(0, 3, size=(9, 9)), 3)
    assert set(np.unique(resample_nearest(labels, 5, 13).classes)) <= {0, 1, 2}


def test_image_and_label_validation() -> None:
    with pytest.raises(ShapeError):
        IntensityImage(np.array([[1.5]]), Modality.SOURCE)
    with pytest.raises(ShapeError):
        LabelMap(np.array([[0, 2]]), 2)


def test_pgm_round_trip_with_comment(tmp_path) -> None:
    samples = np.array([[0, 1, 65535], [300, 7, 2]])
    payload = encode_pgm(samples, "config_hash=abc")
    assert payload.startswith(b"P5\n# config_hash=abc\n3 2\n65535\n")
    np.testing.assert_array_equal(decode_pgm(payload), samples)
    pixels = np.random.default_rng(1).random((4, 5)).astype(np.float32)
    write_image_pgm(tmp_path / "a.pgm", pixels)
    assert np.abs(read_image_pgm(tmp_path / "a.pgm") - pixels).max() <= 0.5 / PGM_MAXVAL + 1e-7


def test_pgm_rejects_bad_payloads() -> None:
    good = encode_pgm(np.zeros((2, 2), dtype=int))
    with pytest.raises(DataError):
        decode_pgm(good[:-1])
    with pytest.raises(DataError):
        decode_pgm(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ShapeError):
        encode_pgm(np.array([[70000]]))


def _pool(n: int, labels: bool, value: float) -> SlicePool:
    images = np.full((n, 4, 4), value, dtype=np.float32) + np.arange(n)[:, None, None] / 100
    lab = np.tile(np.arange(n)[:, None, None] % 2, (1, 4, 4)) if labels else None
    return SlicePool(images, lab, [f"s{i}" for i in range(n)])


def test_sampler_is_uniform_and_aligned() -> None:
    source, target = _pool(3, True, 0.1), _pool(5, False, 0.5)
    sampler = unpaired_sampler(source, target, 1, stream(0, "sampler"))
    xs, ys = [], []
    for _ in range(3000):
        batch = next(sampler)
        assert batch.x.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(batch.labels, source.labels[batch.x_index])
        np.testing.assert_array_equal(batch.x[:, 0], source.images[batch.x_index])
        xs.append(int(batch.x_index[0]))
        ys.append(int(batch.y_index[0]))
    assert chisquare(np.bincount(xs, minlength=3)).pvalue > 1e-4
    assert chisquare(np.bincount(ys, minlength=5)).pvalue > 1e-4


def test_sampler_replays_from_same_stream() -> None:
    source, target = _pool(3, True, 0.1), _pool(5, False, 0.5)
    a = unpaired_sampler(source, target, 2, stream(4, "sampler"))
    b = unpaired_sampler(source, target, 2, stream(4, "sampler"))
    for _ in range(10):
        ba, bb = next(a), next(b)
        np.testing.assert_array_equal(ba.x_index, bb.x_index)
        np.testing.assert_array_equal(ba.y_index, bb.y_index)


def test_sampler_requires_source_labels() -> None:
    with pytest.raises(DataError):
        next(unpaired_sampler(_pool(2, False, 0.1), _pool(2, False, 0.5), 1, stream(0, "s")))


def test_reader_refuses_eval_only(tiny_dataset) -> None:
    reader = DatasetReader(tiny_dataset, 2)
    with pytest.raises(DataError):
        reader.load_split("eval_only", Modality.TARGET, True)
    with pytest.raises(DataError):
        reader._open("eval_only/labels/T000_000.pgm")
    scans = reader.load_split("train", Modality.TARGET, False)
    assert all(s.labels is None for s in scans)
    assert all("eval_only" not in p.parts for p in reader.opened)
