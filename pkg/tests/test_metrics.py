import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modules.data import LabelMap
from modules.errors import ShapeError
from modules.metrics import (
    MetricsRecord,
    asd,
    asd_volume,
    boundary,
    compare_variants,
    dice,
    ordering_check,
    summarize,
    wilcoxon_signed_rank,
)


def _square(size: int, r0: int, c0: int, side: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=int)
    m[r0:r0 + side, c0:c0 + side] = 1
    return m


def test_dice_examples() -> None:
    a = _square(6, 1, 1, 2)
    assert dice(a, a, 1) == 1.0
    assert dice(a, _square(6, 4, 4, 2), 1) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3)), 1) == 1.0
    assert dice(LabelMap(a, 2), LabelMap(_square(6, 1, 2, 2), 2), 1) == 0.5
    with pytest.raises(ShapeError):
        dice(a, np.zeros((5, 5)), 1)


def test_boundary_of_square() -> None:
    edge = boundary(_square(5, 1, 1, 3))
    assert edge.sum() == 8
    assert not edge[2, 2]
    assert boundary(np.ones((2, 2))).sum() == 4


def _oracle_asd(a: np.ndarray, b: np.ndarray, spacing, thickness) -> float:
    """Contours et distances par boucles explicites."""

    def points(masks):
        out = []
        for s, m in enumerate(masks):
            h, w = m.shape
            for r in range(h):
                for c in range(w):
                    if not m[r, c]:
                        continue
                    nbrs = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
                    if any(not (0 <= i < h and 0 <= j < w) or not m[i, j] for i, j in nbrs):
                        out.append((s * thickness, r * spacing[0], c * spacing[1]))
        return np.array(out)

    pa, pb = points(a), points(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(np.concatenate([d.min(axis=1), d.min(axis=0)]).mean())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_asd_matches_brute_force(seed: int) -> None:
    rng = np.random.default_rng(seed)
    a = rng.random((2, 7, 6)) < 0.4
    b = rng.random((2, 7, 6)) < 0.4
    a[0, 3, 3] = b[1, 2, 2] = True
    got = asd_volume(a.astype(int), b.astype(int), 1, (0.8, 1.5), 2.0)
    assert got == pytest.approx(_oracle_asd(a, b, (0.8, 1.5), 2.0), rel=1e-9)


def test_asd_examples() -> None:
    a = _square(8, 2, 2, 3)
    assert asd(a, a, 1) == 0.0
    assert asd(a, _square(8, 2, 3, 3), 1, (1.0, 2.0)) > 0.0
    assert math.isnan(asd(a, np.zeros((8, 8), dtype=int), 1))


def test_asd_single_pixels_and_anisotropic_spacing() -> None:
    left, right = np.zeros((9, 9), dtype=int), np.zeros((9, 9), dtype=int)
    left[4, 2] = right[4, 5] = 1
    assert asd(left, right, 1, (1.0, 1.0)) == 3.0
    assert asd(left, right, 1, (1.0, 2.0)) == 6.0
    assert asd(left.T, right.T, 1, (2.0, 1.0)) == 6.0


def _oracle_dice(a: np.ndarray, b: np.ndarray) -> float:
    sa = {tuple(p) for p in np.argwhere(a == 1)}
    sb = {tuple(p) for p in np.argwhere(b == 1)}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def test_dice_matches_set_arithmetic() -> None:
    rng = np.random.default_rng(11)
    for _ in range(200):
        h, w = rng.integers(1, 17, size=2)
        density = rng.uniform(0.0, 0.8)
        a = (rng.random((h, w)) < density).astype(int)
        b = (rng.random((h, w)) < density).astype(int)
        assert dice(a, b, 1) == pytest.approx(_oracle_dice(a, b), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.25, 4.0))
def test_dice_and_asd_symmetry_and_spacing_scaling(seed: int, k: float) -> None:
    rng = np.random.default_rng(seed)
    a = (rng.random((10, 10)) < 0.3).astype(int)
    b = (rng.random((10, 10)) < 0.3).astype(int)
    a[1, 1] = b[8, 7] = 1
    assert dice(a, b, 1) == dice(b, a, 1)
    base = asd(a, b, 1, (0.7, 1.3))
    assert asd(b, a, 1, (0.7, 1.3)) == pytest.approx(base, rel=1e-12)
    assert asd(a, b, 1, (0.7 * k, 1.3 * k)) == pytest.approx(k * base, rel=1e-9)


def _exact_by_enumeration(d: np.ndarray) -> float:
    from scipy.stats import rankdata

    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    w = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    signs = np.array(list(itertools.product((0, 1), repeat=len(d))), dtype=np.float64)
    plus = signs @ ranks
    hits = np.minimum(plus, ranks.sum() - plus) <= w + 1e-9
    return float(hits.sum()) / 2 ** len(d)


def test_wilcoxon_all_positive_differences() -> None:
    five = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert five.p_value == pytest.approx(0.0625)
    assert five.statistic == 0.0 and five.method == "exact"
    six = wilcoxon_signed_rank(np.arange(1, 7), np.zeros(6))
    assert six.p_value == pytest.approx(0.03125)
    assert six.significant


@pytest.mark.parametrize("n", range(1, 13))
def test_wilcoxon_exact_matches_enumeration(n: int) -> None:
    rng = np.random.default_rng(n)
    for _ in range(50):
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=n), 1)
        if np.all(a == b):
            continue
        res = wilcoxon_signed_rank(a, b, method="exact")
        assert res.p_value == pytest.approx(_exact_by_enumeration(a - b), abs=1e-12)


def test_wilcoxon_exact_and_approx_agree_at_twenty() -> None:
    rng = np.random.default_rng(20)
    for _ in range(25):
        a = rng.normal(size=20)
        b = a + rng.normal(loc=rng.uniform(-0.5, 0.5), size=20)
        exact = wilcoxon_signed_rank(a, b, method="exact")
        approx = wilcoxon_signed_rank(a, b, method="approx")
        assert exact.method == "exact" and approx.method == "approx"
        assert abs(exact.p_value - approx.p_value) < 0.02


def test_wilcoxon_degenerate_and_approx() -> None:
    res = wilcoxon_signed_rank([0.5, 0.7], [0.5, 0.7])
    assert res.p_value == 1.0 and res.method == "degenerate"
    rng = np.random.default_rng(0)
    a = rng.normal(size=40)
    approx = wilcoxon_signed_rank(a, a + 1.0)
    assert approx.method == "approx" and approx.p_value < 1e-6
    swapped = wilcoxon_signed_rank(a + 1.0, a)
    assert swapped.p_value == pytest.approx(approx.p_value)
    with pytest.raises(ShapeError):
        wilcoxon_signed_rank([1, 2], [1])


def _records(values: dict[str, list[float]]) -> list[MetricsRecord]:
    return [MetricsRecord(f"T{i:03d}", v, 1.0 + i, variant, 10)
            for variant, vs in values.items() for i, v in enumerate(vs)]


def test_summary_uses_population_std() -> None:
    summary = summarize(_records({"SYNSEG": [0.6, 0.8], "HC": [0.4, 0.4]}))
    row = summary[summary["variant"] == "SYNSEG"].iloc[0]
    assert row["dsc_median"] == pytest.approx(0.7)
    assert row["dsc_std"] == pytest.approx(0.1)
    assert row["asd_mm_mean"] == pytest.approx(1.5)
    assert int(row["n"]) == 2


def test_comparisons_and_ordering() -> None:
    values = {
        "SEG_ONLY": [0.90 + 0.001 * i for i in range(6)],
        "SYNSEG": [0.85 + 0.001 * i for i in range(6)],
        "TWO_STAGE": [0.70 + 0.001 * i for i in range(6)],
        "HC": [0.50 + 0.001 * i for i in range(6)],
    }
    records = _records(values)
    comparisons = compare_variants(records)
    assert len(comparisons) == 6
    first = comparisons.iloc[0]
    assert (first["variant_a"], first["variant_b"]) == ("SEG_ONLY", "SYNSEG")
    assert set(comparisons["marker"]) == {"*"}
    result = ordering_check(summarize(records), comparisons)
    assert result["passed"]
    assert result["calibrated_floor"] == pytest.approx(0.80)
    partial = [r for r in records if r.variant != "HC"]
    assert ordering_check(summarize(partial), compare_variants(partial)) is None


def test_record_validation() -> None:
    with pytest.raises(ShapeError):
        MetricsRecord("T000", 1.2, 0.0, "SYNSEG", 1)
    assert math.isnan(MetricsRecord("T000", 0.0, float("nan"), "HC", 1).asd_mm)
