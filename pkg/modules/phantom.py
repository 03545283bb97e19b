# -*- coding: utf-8 -*-
"""
CrossSeg — Module phantom
Objectif: Jeu de données procédural à deux modalités (source étiquetée, cible non étiquetée).

Monde commun : disque « corps », ellipse « organe » (cible de segmentation), petites
ellipses leurres. La source est rendue avec fA(t) = t (+ texture du corps), la cible avec
fB(t) = 1 − t^1.5 modulée par un champ de biais basse fréquence ; bruit gaussien partout.
Les labels cible sont produits mais rangés à part (`target_labels`) : ils ne rejoignent
jamais le split d'entraînement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from modules.data import (
    EVAL_ONLY_DIR,
    DatasetInfo,
    LabelMap,
    Modality,
    Scan,
    normalize,
    to_images,
    write_dataset_info,
    write_image_pgm,
    write_label_pgm,
    write_manifest,
)
from modules.errors import ConfigError, DataError
from modules.rng import stream

logger = logging.getLogger(__name__)

TISSUE_BODY = 0.35
TISSUE_CONFOUNDER = 0.6
TISSUE_ORGAN = 0.85
MRI_UNIT_SCALE = 1000.0
KINDS = ("mri", "ct")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_source_scans: int = 20
    n_target_scans: int = 8
    n_val_scans: int = 4
    slices_per_scan: int = 16
    native_size: int = 96
    spacing_mm: float = 1.0
    n_classes: int = 2
    source_kind: str = "mri"
    body_radius: float = 0.45
    organ_radius_min: float = 0.15
    organ_radius_max: float = 0.25
    organ_jitter: float = 0.05
    slice_scale_min: float = 0.6
    n_confounders: int = 2
    confounder_radius: float = 0.06
    texture_amplitude: float = 0.08
    bias_amplitude: float = 0.2
    noise_std: float = 0.03

    def __post_init__(self) -> None:
        if self.source_kind not in KINDS:
            raise ConfigError(f"phantom.source_kind inconnu: {self.source_kind}")
        if self.n_classes not in (2, 3):
            raise ConfigError(f"phantom: n_classes doit valoir 2 ou 3 (reçu {self.n_classes})")
        if min(self.n_source_scans, self.n_target_scans, self.slices_per_scan) < 1:
            raise ConfigError("phantom: au moins un sujet et une coupe par modalité")
        if self.n_val_scans < 0:
            raise ConfigError(f"phantom.n_val_scans négatif: {self.n_val_scans}")
        if self.native_size < 8:
            raise ConfigError(f"phantom.native_size trop petit: {self.native_size}")
        if not 0 < self.organ_radius_min <= self.organ_radius_max:
            raise ConfigError("phantom: 0 < organ_radius_min ≤ organ_radius_max requis")
        if self.organ_radius_max + self.organ_jitter >= self.body_radius or self.body_radius > 0.5:
            raise ConfigError("phantom: l'organe doit tenir dans le corps, le corps dans l'image")
        if not 0 < self.slice_scale_min <= 1:
            raise ConfigError(f"phantom.slice_scale_min hors ]0, 1]: {self.slice_scale_min}")
        if self.noise_std < 0 or self.bias_amplitude < 0 or self.texture_amplitude < 0:
            raise ConfigError("phantom: amplitudes de bruit / biais / texture négatives")

    @property
    def target_kind(self) -> str:
        return "ct" if self.source_kind == "mri" else "mri"

    def kind_of(self, modality: Modality) -> str:
        return self.source_kind if modality is Modality.SOURCE else self.target_kind


@dataclass
class PhantomDataset:
    spec: PhantomSpec
    source: list[Scan]
    source_val: list[Scan]
    target: list[Scan]
    target_labels: dict[str, list[LabelMap]]
    raw: dict[str, np.ndarray] = field(default_factory=dict)


def transfer_source(t: np.ndarray) -> np.ndarray:
    return t


def transfer_target(t: np.ndarray) -> np.ndarray:
    return 1.0 - np.power(t, 1.5)


def slice_scale(k: int, n: int, minimum: float) -> float:
    """Profil en cloche le long de la pile : organe plus petit aux extrémités."""
    return minimum + (1.0 - minimum) * float(np.sin(np.pi * (k + 0.5) / n))


def _ellipse(rr: np.ndarray, cc: np.ndarray, center: tuple[float, float], a: float, b: float,
             theta: float) -> np.ndarray:
    dr, dc = rr - center[0], cc - center[1]
    u = dr * np.cos(theta) + dc * np.sin(theta)
    v = -dr * np.sin(theta) + dc * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@dataclass(frozen=True)
class _World:
    """Paramètres de forme d'un sujet (constants sur la pile)."""

    organ_center: tuple[float, float]
    organ_axes: tuple[float, float]
    organ_theta: float
    confounders: tuple[tuple[float, float], ...]


def _draw_world(spec: PhantomSpec, rng: np.random.Generator) -> _World:
    n = spec.native_size
    mid = (n - 1) / 2.0
    jitter = rng.uniform(-spec.organ_jitter, spec.organ_jitter, size=2) * n
    axes = rng.uniform(spec.organ_radius_min, spec.organ_radius_max, size=2) * n
    theta = float(rng.uniform(0.0, np.pi))
    confounders = []
    for _ in range(spec.n_confounders):
        angle = rng.uniform(0.0, 2 * np.pi)
        dist = 0.7 * spec.body_radius * n
        confounders.append((mid + dist * np.sin(angle), mid + dist * np.cos(angle)))
    return _World((mid + jitter[0], mid + jitter[1]), (float(axes[0]), float(axes[1])), theta,
                  tuple(confounders))


def _render_slice(spec: PhantomSpec, world: _World, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Tissu t ∈ [0, 1] et labels d'une coupe."""
    n = spec.native_size
    mid = (n - 1) / 2.0
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    body = (rr - mid) ** 2 + (cc - mid) ** 2 <= (spec.body_radius * n) ** 2
    tissue = np.where(body, TISSUE_BODY, 0.0)
    labels = np.where(body, 2, 0) if spec.n_classes == 3 else np.zeros((n, n), dtype=np.int64)
    radius = spec.confounder_radius * n
    for center in world.confounders:
        tissue[_ellipse(rr, cc, center, radius, radius, 0.0) & body] = TISSUE_CONFOUNDER
    a, b = world.organ_axes
    organ = _ellipse(rr, cc, world.organ_center, a * scale, b * scale, world.organ_theta)
    tissue[organ] = TISSUE_ORGAN
    labels[organ] = 1
    return tissue, labels.astype(np.int64)


def _smooth_field(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    field_ = gaussian_filter(rng.standard_normal((n, n)), sigma=sigma, mode="reflect")
    spread = float(np.abs(field_).max())
    return field_ / spread if spread > 0 else field_


def _bias_field(rng: np.random.Generator, n: int, amplitude: float) -> np.ndarray:
    phase, angle = rng.uniform(0.0, 2 * np.pi, size=2)
    rr, cc = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    wave = np.cos(np.pi * (rr * np.cos(angle) + cc * np.sin(angle)) + phase)
    return 1.0 + amplitude * wave


def to_units(rendered: np.ndarray, kind: str) -> np.ndarray:
    """Intensité rendue [0, 1] → unités physiques (HU pour `ct`, u.a. pour `mri`)."""
    if kind == "ct":
        return rendered * 2000.0 - 1000.0
    return rendered * MRI_UNIT_SCALE


def _render_scan(spec: PhantomSpec, modality: Modality, scan_id: str
                 ) -> tuple[np.ndarray, list[np.ndarray]]:
    rng = stream(spec.seed, f"phantom.{scan_id}")
    world = _draw_world(spec, rng)
    n = spec.native_size
    bias = _bias_field(rng, n, spec.bias_amplitude) if modality is Modality.TARGET else None
    slices, labels = [], []
    for k in range(spec.slices_per_scan):
        tissue, lab = _render_slice(spec, world, slice_scale(k, spec.slices_per_scan,
                                                             spec.slice_scale_min))
        if modality is Modality.SOURCE:
            body = tissue > 0
            texture = spec.texture_amplitude * _smooth_field(rng, n, sigma=2.0)
            rendered = transfer_source(np.where(body, tissue + texture, tissue))
        else:
            rendered = transfer_target(tissue) * bias
        rendered = rendered + rng.normal(0.0, spec.noise_std, size=(n, n))
        slices.append(to_units(rendered, spec.kind_of(modality)))
        labels.append(lab)
    return np.stack(slices).astype(np.float32), labels


def _make_scan(spec: PhantomSpec, modality: Modality, scan_id: str, raw: dict[str, np.ndarray],
               with_labels: bool) -> tuple[Scan, list[LabelMap]]:
    volume, labels = _render_scan(spec, modality, scan_id)
    raw[scan_id] = volume
    spacing = (spec.spacing_mm, spec.spacing_mm)
    images = to_images(normalize(volume, spec.kind_of(modality)), modality, spacing, scan_id)
    maps = [LabelMap(lab, spec.n_classes, spacing) for lab in labels]
    return Scan(scan_id, modality, images, maps if with_labels else None), maps


def phantom_generate(spec: PhantomSpec) -> PhantomDataset:
    """Déterministe : même `spec` → mêmes tableaux, octet pour octet."""
    raw: dict[str, np.ndarray] = {}
    source = [_make_scan(spec, Modality.SOURCE, f"S{i:03d}", raw, True)[0]
              for i in range(spec.n_source_scans)]
    source_val = [_make_scan(spec, Modality.SOURCE, f"V{i:03d}", raw, True)[0]
                  for i in range(spec.n_val_scans)]
    target: list[Scan] = []
    target_labels: dict[str, list[LabelMap]] = {}
    for i in range(spec.n_target_scans):
        scan, maps = _make_scan(spec, Modality.TARGET, f"T{i:03d}", raw, False)
        target.append(scan)
        target_labels[scan.scan_id] = maps
    logger.info(
        "fantôme généré: %d sources (+%d validation), %d cibles, %d coupes de %dx%d",
        len(source), len(source_val), len(target), spec.slices_per_scan,
        spec.native_size, spec.native_size,
    )
    return PhantomDataset(spec, source, source_val, target, target_labels, raw)


# ---------------------------------------------------------------------
# Écriture sur disque
# ---------------------------------------------------------------------
def _write_scans(root: Path, split: str, scans: list[Scan], labels: dict[str, list[LabelMap]],
                 label_dir: str, config_hash: str = "") -> list[dict]:
    records = []
    for scan in scans:
        maps = labels.get(scan.scan_id)
        for img in scan.images:
            stem = f"{scan.scan_id}_{img.slice_index:03d}.pgm"
            image_rel = f"{split}/images/{stem}"
            note = f"config_hash={config_hash}"
            write_image_pgm(root / image_rel, img.pixels, note)
            label_rel = ""
            if maps is not None:
                label_rel = f"{label_dir}/labels/{stem}"
                write_label_pgm(root / label_rel, maps[img.slice_index].classes, note)
            records.append({
                "scan_id": scan.scan_id,
                "modality": scan.modality.value,
                "slice_index": img.slice_index,
                "image_path": image_rel,
                "label_path": label_rel,
                "spacing_row_mm": img.spacing_mm[0],
                "spacing_col_mm": img.spacing_mm[1],
            })
    return records


def write_phantom_dataset(ds: PhantomDataset, root: Path, config_hash: str = "") -> Path:
    """`train/` (sources étiquetées + cibles sans label), `val/`, `eval_only/` (labels cible)."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"répertoire de sortie non inscriptible: {root} ({exc})") from exc
    source_labels = {s.scan_id: s.labels for s in ds.source + ds.source_val if s.labels}
    train = _write_scans(root, "train", ds.source, source_labels, "train", config_hash)
    train += _write_scans(root, "train", ds.target, {}, "train", config_hash)
    write_manifest(root / "train" / "manifest.csv", train)
    val = _write_scans(root, "val", ds.source_val, source_labels, "val", config_hash)
    write_manifest(root / "val" / "manifest.csv", val)
    held_out = []
    for scan in ds.target:
        for img in scan.images:
            stem = f"{scan.scan_id}_{img.slice_index:03d}.pgm"
            label_rel = f"{EVAL_ONLY_DIR}/labels/{stem}"
            classes = ds.target_labels[scan.scan_id][img.slice_index].classes
            write_label_pgm(root / label_rel, classes, f"config_hash={config_hash}")
            held_out.append({
                "scan_id": scan.scan_id,
                "modality": scan.modality.value,
                "slice_index": img.slice_index,
                "image_path": f"train/images/{stem}",
                "label_path": label_rel,
                "spacing_row_mm": img.spacing_mm[0],
                "spacing_col_mm": img.spacing_mm[1],
            })
    write_manifest(root / EVAL_ONLY_DIR / "manifest.csv", held_out)
    write_dataset_info(root, DatasetInfo(
        n_classes=ds.spec.n_classes,
        native_size=ds.spec.native_size,
        source_kind=ds.spec.source_kind,
        target_kind=ds.spec.target_kind,
        config_hash=config_hash,
    ))
    logger.info("jeu de données écrit dans %s (%d coupes d'entraînement)", root, len(train))
    return root
