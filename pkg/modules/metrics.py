# -*- coding: utf-8 -*-
"""
CrossSeg — Module metrics
Objectif: Évaluation — Dice, distance de surface moyenne (mm), test des rangs signés de Wilcoxon,
résumés par variante et comparaisons appariées.

Points clés:
- Contour = pixels de la classe ayant au moins un 4-voisin hors classe ; le bord de l'image
  compte comme fond.
- ASD symétrique : moyenne sur l'union des deux ensembles de distances orientées.
- Volumes : les points de contour de toutes les coupes d'un sujet sont mis en commun
  (coordonnée z = indice de coupe × épaisseur).
- Wilcoxon : différences nulles écartées, rangs moyens pour les ex aequo ; loi exacte par
  programmation dynamique jusqu'à n = 20, approximation normale (ex aequo + continuité) au-delà.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.stats import norm, rankdata

from modules.data import LabelMap
from modules.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 20
SIGNIFICANCE = 0.05
RESULT_COLUMNS = ["subject_id", "variant", "epoch", "class", "dsc", "asd_mm"]
VARIANT_ORDER = ("SEG_ONLY", "SYNSEG", "TWO_STAGE", "HC")


@dataclass
class MetricsRecord:
    subject_id: str
    dsc: float
    asd_mm: float
    variant: str
    epoch: int
    class_id: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.dsc <= 1.0:
            raise ShapeError(f"{self.subject_id}: DSC hors [0, 1] ({self.dsc})")
        if not math.isnan(self.asd_mm) and self.asd_mm < 0:
            raise ShapeError(f"{self.subject_id}: ASD négative ({self.asd_mm})")


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE


def _classes(x: LabelMap | np.ndarray) -> np.ndarray:
    return x.classes if isinstance(x, LabelMap) else np.asarray(x)


# ---------------------------------------------------------------------
# Dice / ASD
# ---------------------------------------------------------------------
def dice(pred: LabelMap | np.ndarray, truth: LabelMap | np.ndarray, class_id: int) -> float:
    """2|A∩B| / (|A| + |B|) ; 1.0 si les deux masques sont vides."""
    p, t = _classes(pred), _classes(truth)
    if p.shape != t.shape:
        raise ShapeError(f"dice: formes différentes {p.shape} / {t.shape}")
    a, b = p == class_id, t == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels de premier plan ayant au moins un 4-voisin de fond (bord d'image = fond)."""
    m = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    inner = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def _surface_points(masks: np.ndarray, spacing_mm: Sequence[float],
                    slice_thickness_mm: float) -> np.ndarray:
    """Coordonnées (mm) des contours d'une pile (S, H, W), z = s × épaisseur."""
    points = []
    for s, mask in enumerate(masks):
        rc = np.argwhere(boundary(mask)).astype(np.float64)
        if rc.size == 0:
            continue
        z = np.full((rc.shape[0], 1), s * slice_thickness_mm)
        points.append(np.hstack([z, rc[:, :1] * spacing_mm[0], rc[:, 1:] * spacing_mm[1]]))
    return np.vstack(points) if points else np.empty((0, 3))


def _symmetric_mean(pa: np.ndarray, pb: np.ndarray) -> float:
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(np.concatenate([d_ab, d_ba]).mean())


def asd(pred: LabelMap | np.ndarray, truth: LabelMap | np.ndarray, class_id: int,
        spacing_mm: Sequence[float] = (1.0, 1.0)) -> float:
    """Distance de surface moyenne symétrique (mm) d'une coupe ; NaN si un masque est vide."""
    p, t = _classes(pred), _classes(truth)
    if p.shape != t.shape or p.ndim != 2:
        raise ShapeError(f"asd: cartes 2-D de même forme attendues {p.shape} / {t.shape}")
    return asd_volume(p[None], t[None], class_id, spacing_mm)


def asd_volume(pred: np.ndarray, truth: np.ndarray, class_id: int,
               spacing_mm: Sequence[float] = (1.0, 1.0), slice_thickness_mm: float = 1.0) -> float:
    """ASD d'un sujet : contours 2-D par coupe, points mis en commun sur la pile."""
    p, t = np.asarray(pred), np.asarray(truth)
    if p.shape != t.shape or p.ndim != 3:
        raise ShapeError(f"asd_volume: piles (S, H, W) de même forme attendues {p.shape} / {t.shape}")
    pa = _surface_points(p == class_id, spacing_mm, slice_thickness_mm)
    pb = _surface_points(t == class_id, spacing_mm, slice_thickness_mm)
    if len(pa) == 0 or len(pb) == 0:
        logger.warning("ASD indéfinie (classe %d absente d'un des masques) : valeur manquante",
                       class_id)
        return float("nan")
    return _symmetric_mean(pa, pb)


def evaluate_subject(pred: np.ndarray, truth: np.ndarray, class_id: int,
                     spacing_mm: Sequence[float], slice_thickness_mm: float) -> tuple[float, float]:
    """(DSC voxel à voxel, ASD en mm) sur la pile complète d'un sujet."""
    return (dice(pred, truth, class_id),
            asd_volume(pred, truth, class_id, spacing_mm, slice_thickness_mm))


# ---------------------------------------------------------------------
# Wilcoxon
# ---------------------------------------------------------------------
def _exact_p(doubled_ranks: np.ndarray, w_doubled: int) -> float:
    """P(min(W⁺, W⁻) ≤ W) sous H0, par dénombrement des 2ⁿ signes (DP sur les sommes)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    sums = np.arange(total + 1)
    hit = np.minimum(sums, total - sums) <= w_doubled
    return float(counts[hit].sum() / 2.0 ** len(doubled_ranks))


def _approx_p(w: float, n: int, ranks_abs: np.ndarray) -> float:
    mu = n * (n + 1) / 4.0
    _, ties = np.unique(ranks_abs, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((ties**3 - ties).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w - mu) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         method: str = "auto") -> WilcoxonResult:
    """Test bilatéral des rangs signés ; W = min(W⁺, W⁻)."""
    x, y = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"wilcoxon: séries appariées 1-D attendues {x.shape} / {y.shape}")
    if method not in ("auto", "exact", "approx"):
        raise ShapeError(f"wilcoxon: méthode inconnue {method}")
    d = x - y
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        logger.warning("wilcoxon: toutes les différences sont nulles, p = 1")
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    use_exact = method == "exact" or (method == "auto" and n <= EXACT_MAX_N)
    if use_exact:
        p = _exact_p(np.rint(2 * ranks).astype(int), int(round(2 * w)))
        return WilcoxonResult(w, p, n, "exact")
    return WilcoxonResult(w, _approx_p(w, n, np.abs(d)), n, "approx")


# ---------------------------------------------------------------------
# Tableaux
# ---------------------------------------------------------------------
def records_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    rows = [asdict(r) for r in records]
    frame = pd.DataFrame(rows, columns=["subject_id", "variant", "epoch", "class_id", "dsc",
                                        "asd_mm"])
    return frame.rename(columns={"class_id": "class"})[RESULT_COLUMNS]


def summarize(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    """Médiane, moyenne, écart-type (population) par variante et par classe."""
    if not records:
        raise DataError("summarize: aucun enregistrement")
    frame = records_frame(records)
    rows = []
    for (variant, cls), grp in frame.groupby(["variant", "class"], sort=True):
        row = {"variant": variant, "class": int(cls), "n": len(grp)}
        for metric in ("dsc", "asd_mm"):
            values = grp[metric].dropna()
            row[f"{metric}_median"] = float(values.median()) if len(values) else float("nan")
            row[f"{metric}_mean"] = float(values.mean()) if len(values) else float("nan")
            row[f"{metric}_std"] = float(values.std(ddof=0)) if len(values) else float("nan")
        rows.append(row)
    return pd.DataFrame(rows)


def compare_variants(records: Sequence[MetricsRecord], metric: str = "dsc") -> pd.DataFrame:
    """Wilcoxon apparié par sujet pour chaque paire de variantes (même classe)."""
    frame = records_frame(records)
    rows = []
    for cls, grp in frame.groupby("class", sort=True):
        table = grp.pivot_table(index="subject_id", columns="variant", values=metric,
                                aggfunc="first")
        for va, vb in itertools.combinations(sorted(table.columns, key=_variant_rank), 2):
            pair = table[[va, vb]].dropna()
            if pair.empty:
                continue
            res = wilcoxon_signed_rank(pair[va].to_numpy(), pair[vb].to_numpy())
            rows.append({
                "class": int(cls), "variant_a": va, "variant_b": vb, "n": len(pair),
                "statistic": res.statistic, "p_value": res.p_value, "method": res.method,
                "marker": "*" if res.significant else "N.S.",
            })
    return pd.DataFrame(rows, columns=["class", "variant_a", "variant_b", "n", "statistic",
                                       "p_value", "method", "marker"])


def _variant_rank(variant: str) -> tuple[int, str]:
    return (VARIANT_ORDER.index(variant) if variant in VARIANT_ORDER else len(VARIANT_ORDER),
            variant)


def ordering_check(summary: pd.DataFrame, comparisons: pd.DataFrame,
                   class_id: int = 1) -> dict | None:
    """Relations attendues SEG_ONLY ≥ SYNSEG > TWO_STAGE > HC, plancher calibré sur SEG_ONLY."""
    sub = summary[summary["class"] == class_id].set_index("variant")["dsc_median"]
    if not set(VARIANT_ORDER) <= set(sub.index):
        return None
    med = {v: float(sub[v]) for v in VARIANT_ORDER}
    floor = min(0.80, med["SEG_ONLY"] - 0.10)
    pair = comparisons[(comparisons["class"] == class_id)
                       & (comparisons["variant_a"] == "SYNSEG")
                       & (comparisons["variant_b"] == "HC")]
    p_hc = float(pair["p_value"].iloc[0]) if len(pair) else float("nan")
    checks = {
        "seg_only_ge_synseg": med["SEG_ONLY"] >= med["SYNSEG"],
        "synseg_gt_two_stage": med["SYNSEG"] > med["TWO_STAGE"],
        "two_stage_gt_hc": med["TWO_STAGE"] > med["HC"],
        "synseg_above_floor": med["SYNSEG"] >= floor,
        "hc_margin": med["HC"] <= med["SYNSEG"] - 0.05,
        "synseg_vs_hc_significant": bool(p_hc < SIGNIFICANCE),
    }
    return {"medians": med, "calibrated_floor": floor, "p_synseg_vs_hc": p_hc,
            "checks": checks, "passed": all(checks.values())}
