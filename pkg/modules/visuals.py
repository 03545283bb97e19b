# -*- coding: utf-8 -*-
"""
CrossSeg — Module visuals
Objectif: Figures statiques (matplotlib) — courbes de pertes, boîtes à moustaches des DSC avec
marqueurs de significativité, et assemblage des montages PGM.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.axes import Axes  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from modules.errors import ShapeError  # noqa: E402

logger = logging.getLogger(__name__)

BACKGROUND_COLOR = "#050912"
BORDER_COLOR = "#1e293b"
TEXT_COLOR = "#f8fafc"
TEXT_MUTED = "#cbd5f5"
PART_COLORS = {
    "gan_g1": "#f59e0b",
    "gan_g2": "#fbbf24",
    "cycle_s": "#6366f1",
    "cycle_t": "#818cf8",
    "seg": "#22d3ee",
    "d1": "#ef4444",
    "d2": "#f87171",
}
VARIANT_COLORS = {
    "SEG_ONLY": "#22d3ee",
    "SYNSEG": "#6366f1",
    "TWO_STAGE": "#f59e0b",
    "HC": "#ef4444",
}


def _style(fig: Figure, ax: Axes) -> None:
    fig.patch.set_facecolor(BACKGROUND_COLOR)
    ax.set_facecolor(BACKGROUND_COLOR)
    for spine in ax.spines.values():
        spine.set_color(BORDER_COLOR)
    ax.tick_params(colors=TEXT_MUTED)
    ax.xaxis.label.set_color(TEXT_MUTED)
    ax.yaxis.label.set_color(TEXT_MUTED)
    ax.title.set_color(TEXT_COLOR)


def _legend(ax: Axes, labels: Sequence[str], colors: Sequence[str]) -> None:
    items = [mpatches.Patch(color=c, label=lab) for lab, c in zip(labels, colors, strict=True)]
    leg = ax.legend(
        handles=items,
        loc="upper right",
        facecolor=BACKGROUND_COLOR,
        edgecolor=BORDER_COLOR,
        framealpha=0.9,
    )
    for text in leg.get_texts():
        text.set_color(TEXT_MUTED)


def plot_loss_curves(losses: pd.DataFrame) -> Figure:
    """Moyenne par époque de chaque composante non nulle (axe x = époque cumulée sur les étapes)."""
    fig, ax = plt.subplots(figsize=(10, 5), dpi=120)
    _style(fig, ax)
    ax.set_xlabel("époque")
    ax.set_ylabel("perte moyenne")
    ax.set_title("Pertes d'entraînement")
    if losses.empty:
        ax.text(0.5, 0.5, "aucune étape", ha="center", va="center", color=TEXT_MUTED,
                transform=ax.transAxes)
        return fig
    per_epoch = losses.groupby(["stage", "epoch"], sort=True).mean(numeric_only=True).reset_index()
    x = np.arange(1, len(per_epoch) + 1)
    shown, colors = [], []
    for part, color in PART_COLORS.items():
        if part in per_epoch and per_epoch[part].abs().sum() > 0:
            ax.plot(x, per_epoch[part], color=color, linewidth=1.4)
            shown.append(part)
            colors.append(color)
    if per_epoch["stage"].nunique() > 1:
        boundary = int((per_epoch["stage"] == per_epoch["stage"].min()).sum()) + 0.5
        ax.axvline(boundary, color=BORDER_COLOR, linestyle="--")
    if shown:
        _legend(ax, shown, colors)
    fig.tight_layout(pad=1.2)
    return fig


def _bracket(ax: Axes, x1: float, x2: float, y: float, marker: str) -> None:
    ax.plot([x1, x1, x2, x2], [y, y + 0.01, y + 0.01, y], color=TEXT_MUTED, linewidth=1.0)
    ax.text((x1 + x2) / 2, y + 0.012, marker, ha="center", va="bottom", color=TEXT_COLOR,
            fontsize=9, fontweight="600")


def plot_dsc_boxplot(results: pd.DataFrame, comparisons: pd.DataFrame, class_id: int = 1,
                     order: Sequence[str] | None = None) -> Figure:
    """DSC par sujet et par variante ; crochets « * » (p < 0.05) ou « N.S. » entre paires."""
    sub = results[results["class"] == class_id]
    variants: List[str] = [v for v in (order or sorted(sub["variant"].unique()))
                           if v in set(sub["variant"])]
    fig, ax = plt.subplots(figsize=(8, 5), dpi=120)
    _style(fig, ax)
    ax.set_ylabel("DSC")
    ax.set_title(f"DSC par sujet (classe {class_id})")
    if not variants:
        return fig
    data = [sub.loc[sub["variant"] == v, "dsc"].to_numpy() for v in variants]
    box = ax.boxplot(data, patch_artist=True, widths=0.55)
    ax.set_xticks(range(1, len(variants) + 1), variants)
    for patch, v in zip(box["boxes"], variants, strict=True):
        patch.set_facecolor(VARIANT_COLORS.get(v, TEXT_MUTED))
        patch.set_alpha(0.85)
        patch.set_edgecolor(BORDER_COLOR)
    for key in ("whiskers", "caps", "medians"):
        for line in box[key]:
            line.set_color(TEXT_MUTED)
    top = float(max(np.max(d) for d in data if len(d))) if any(len(d) for d in data) else 1.0
    level = top + 0.02
    pairs = comparisons[comparisons["class"] == class_id] if not comparisons.empty else comparisons
    for row in pairs.itertuples(index=False):
        if row.variant_a in variants and row.variant_b in variants:
            x1 = variants.index(row.variant_a) + 1
            x2 = variants.index(row.variant_b) + 1
            _bracket(ax, x1, x2, level, row.marker)
            level += 0.04
    ax.set_ylim(min(0.0, ax.get_ylim()[0]), max(1.05, level + 0.03))
    fig.tight_layout(pad=1.2)
    return fig


def save_figure(fig: Figure, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, facecolor=fig.get_facecolor())
    plt.close(fig)
    logger.info("figure écrite: %s", path)
    return path


def tile_montage(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Grille de tuiles [0, 1] de même taille : largeur = colonnes × taille de tuile."""
    if not rows:
        raise ShapeError("montage vide")
    tile = np.asarray(rows[0][0]).shape
    n_cols = max(len(r) for r in rows)
    canvas = np.zeros((len(rows) * tile[0], n_cols * tile[1]), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            arr = np.asarray(img, dtype=np.float32)
            if arr.shape != tile:
                raise ShapeError(f"tuile {arr.shape} ≠ {tile}")
            canvas[i * tile[0]:(i + 1) * tile[0], j * tile[1]:(j + 1) * tile[1]] = arr
    return np.clip(canvas, 0.0, 1.0)
