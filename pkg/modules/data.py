# -*- coding: utf-8 -*-
"""
CrossSeg — Module data
Objectif: Prétraitement (percentiles, HU), rééchantillonnage, échantillonneur non apparié,
stockage PGM 16 bits + manifestes, lecture auditée des splits.

Points clés:
- Les labels du domaine cible ne sont lus que par `EvalStore` (split `eval_only/`).
- `DatasetReader.opened` journalise chaque fichier ouvert : l'audit d'hygiène s'appuie dessus.
- Rééchantillonnage bilinéaire en convention « align-corners » (coins sur coins).
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from modules.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

PGM_MAXVAL = 65535
HU_MIN, HU_MAX = -1000.0, 1000.0
LOW_PERCENTILE, HIGH_PERCENTILE = 2.5, 97.5
MANIFEST_COLUMNS = [
    "scan_id",
    "modality",
    "slice_index",
    "image_path",
    "label_path",
    "spacing_row_mm",
    "spacing_col_mm",
]
EVAL_ONLY_DIR = "eval_only"


class Modality(str, enum.Enum):
    SOURCE = "SOURCE"
    TARGET = "TARGET"


@dataclass
class IntensityImage:
    pixels: np.ndarray
    modality: Modality
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    scan_id: str = ""
    slice_index: int = 0

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ShapeError(f"image 2-D attendue, reçu {self.pixels.shape}")
        if min(self.spacing_mm) <= 0:
            raise ShapeError(f"espacement non positif: {self.spacing_mm}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ShapeError(f"{self.scan_id}: intensités hors [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass
class LabelMap:
    classes: np.ndarray
    n_classes: int
    spacing_mm: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.classes.ndim != 2:
            raise ShapeError(f"carte de labels 2-D attendue, reçu {self.classes.shape}")
        if self.classes.size and (self.classes.min() < 0 or self.classes.max() >= self.n_classes):
            raise ShapeError(f"classes hors de [0, {self.n_classes})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape  # type: ignore[return-value]


@dataclass
class Scan:
    """Pile de coupes d'un même sujet ; `labels` absent pour le domaine cible en entraînement."""

    scan_id: str
    modality: Modality
    images: list[IntensityImage]
    labels: list[LabelMap] | None = None

    @property
    def n_slices(self) -> int:
        return len(self.images)

    def volume(self) -> np.ndarray:
        return np.stack([img.pixels for img in self.images])

    def label_volume(self) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"{self.scan_id}: aucun label disponible")
        return np.stack([lab.classes for lab in self.labels])


# ---------------------------------------------------------------------
# Normalisation d'intensité
# ---------------------------------------------------------------------
def normalize_percentile(volume: np.ndarray) -> np.ndarray:
    """Percentiles 2.5 / 97.5 du volume entier → [0, 1], queues saturées."""
    vol = np.asarray(volume, dtype=np.float32)
    if vol.size == 0:
        raise ShapeError("volume vide")
    lo, hi = np.percentile(vol, [LOW_PERCENTILE, HIGH_PERCENTILE])
    if hi <= lo:
        logger.warning("volume constant (p2.5 = p97.5 = %.4g) : sortie fixée à 0.5", lo)
        return np.full(vol.shape, 0.5, dtype=np.float32)
    return np.clip((vol - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def normalize_hu(volume: np.ndarray) -> np.ndarray:
    """HU saturés à [−1000, 1000] puis ramenés linéairement à [0, 1]."""
    vol = np.clip(np.asarray(volume, dtype=np.float32), HU_MIN, HU_MAX)
    return ((vol - HU_MIN) / (HU_MAX - HU_MIN)).astype(np.float32)


def normalize(volume: np.ndarray, kind: str) -> np.ndarray:
    """`mri` → percentiles, `ct` → HU."""
    if kind == "mri":
        return normalize_percentile(volume)
    if kind == "ct":
        return normalize_hu(volume)
    raise ShapeError(f"type de modalité inconnu: {kind}")


def to_images(volume: np.ndarray, modality: Modality, spacing_mm: tuple[float, float],
              scan_id: str) -> list[IntensityImage]:
    return [IntensityImage(np.asarray(s), modality, spacing_mm, scan_id, i)
            for i, s in enumerate(volume)]


# ---------------------------------------------------------------------
# Rééchantillonnage
# ---------------------------------------------------------------------
def _grid(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _check_size(h: int, w: int) -> None:
    if h < 2 or w < 2:
        raise ShapeError(f"taille cible {h}x{w} < 2")


def resample_bilinear(img: IntensityImage, height: int, width: int) -> IntensityImage:
    """Bilinéaire align-corners ; forme a + (b − a)·t, exacte pour les images constantes."""
    _check_size(height, width)
    src = img.pixels
    h, w = src.shape
    if (h, w) == (height, width):
        return replace(img, pixels=src.copy())
    r, c = _grid(h, height), _grid(w, width)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1, c1 = np.minimum(r0 + 1, h - 1), np.minimum(c0 + 1, w - 1)
    tr = (r - r0).astype(np.float32)[:, None]
    tc = (c - c0).astype(np.float32)[None, :]
    top, bottom = src[r0], src[r1]
    rows = top + (bottom - top) * tr
    left, right = rows[:, c0], rows[:, c1]
    out = np.clip(left + (right - left) * tc, 0.0, 1.0).astype(np.float32)
    spacing = (img.spacing_mm[0] * h / height, img.spacing_mm[1] * w / width)
    return replace(img, pixels=out, spacing_mm=spacing)


def resample_nearest(label: LabelMap, height: int, width: int) -> LabelMap:
    """Plus proche voisin sur la même grille align-corners : aucune classe nouvelle."""
    _check_size(height, width)
    h, w = label.shape
    if (h, w) == (height, width):
        return replace(label, classes=label.classes.copy())
    r = np.floor(_grid(h, height) + 0.5).astype(int).clip(0, h - 1)
    c = np.floor(_grid(w, width) + 0.5).astype(int).clip(0, w - 1)
    spacing = (label.spacing_mm[0] * h / height, label.spacing_mm[1] * w / width)
    return replace(label, classes=label.classes[np.ix_(r, c)], spacing_mm=spacing)


def resample_scan(scan: Scan, size: int) -> Scan:
    images = [resample_bilinear(img, size, size) for img in scan.images]
    labels = None
    if scan.labels is not None:
        labels = [resample_nearest(lab, size, size) for lab in scan.labels]
    return Scan(scan.scan_id, scan.modality, images, labels)


# ---------------------------------------------------------------------
# Échantillonneur non apparié
# ---------------------------------------------------------------------
@dataclass
class SampledBatch:
    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    x_index: np.ndarray
    y_index: np.ndarray


@dataclass
class SlicePool:
    """Toutes les coupes de tous les sujets d'un domaine, à plat."""

    images: np.ndarray
    labels: np.ndarray | None
    owners: list[str] = field(default_factory=list)

    @classmethod
    def from_scans(cls, scans: Sequence[Scan], with_labels: bool) -> "SlicePool":
        if not scans:
            raise DataError("pool de coupes vide")
        images = np.concatenate([s.volume() for s in scans]).astype(np.float32)
        labels = np.concatenate([s.label_volume() for s in scans]) if with_labels else None
        owners = [s.scan_id for s in scans for _ in range(s.n_slices)]
        return cls(images, labels, owners)

    def __len__(self) -> int:
        return int(self.images.shape[0])


def unpaired_sampler(source: SlicePool, target: SlicePool, batch: int,
                     rng: np.random.Generator) -> Iterator[SampledBatch]:
    """x uniforme sur les coupes source, y indépendamment uniforme sur les coupes cible."""
    if len(source) == 0 or len(target) == 0:
        raise DataError("échantillonneur: pool source ou cible vide")
    if source.labels is None:
        raise DataError("échantillonneur: labels source requis")
    if batch < 1:
        raise ShapeError(f"batch invalide: {batch}")
    while True:
        xi = rng.integers(0, len(source), size=batch)
        yi = rng.integers(0, len(target), size=batch)
        yield SampledBatch(
            x=source.images[xi][:, None],
            y=target.images[yi][:, None],
            labels=source.labels[xi],
            x_index=xi,
            y_index=yi,
        )


# ---------------------------------------------------------------------
# PGM + manifestes
# ---------------------------------------------------------------------
def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def encode_pgm(samples: np.ndarray, comment: str = "") -> bytes:
    arr = np.asarray(samples)
    if arr.ndim != 2:
        raise ShapeError(f"PGM 2-D attendu, reçu {arr.shape}")
    if arr.min() < 0 or arr.max() > PGM_MAXVAL:
        raise ShapeError("échantillons PGM hors [0, 65535]")
    h, w = arr.shape
    note = f"# {comment}\n" if comment else ""
    header = f"P5\n{note}{w} {h}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + arr.astype(">u2").tobytes()


def decode_pgm(payload: bytes, source: str = "<pgm>") -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(payload) and payload[pos:pos + 1].isspace():
            pos += 1
        if payload[pos:pos + 1] == b"#":
            pos = payload.find(b"\n", pos) + 1
            if pos == 0:
                raise DataError(f"{source}: en-tête PGM tronqué")
            continue
        start = pos
        while pos < len(payload) and not payload[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{source}: en-tête PGM tronqué")
        tokens.append(payload[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{source}: format {tokens[0]!r} non supporté (P5 attendu)")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    body = payload[pos:]
    if len(body) < count * np.dtype(dtype).itemsize:
        raise DataError(f"{source}: données PGM tronquées")
    return np.frombuffer(body, dtype=dtype, count=count).reshape(h, w).astype(np.int64)


def write_image_pgm(path: Path, pixels: np.ndarray, comment: str = "") -> None:
    samples = np.rint(np.clip(pixels, 0.0, 1.0) * PGM_MAXVAL).astype(np.int64)
    atomic_write_bytes(path, encode_pgm(samples, comment))


def write_label_pgm(path: Path, classes: np.ndarray, comment: str = "") -> None:
    atomic_write_bytes(path, encode_pgm(np.asarray(classes, dtype=np.int64), comment))


def read_image_pgm(path: Path) -> np.ndarray:
    return (decode_pgm(Path(path).read_bytes(), str(path)) / PGM_MAXVAL).astype(np.float32)


def read_label_pgm(path: Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes(), str(path))


def write_manifest(path: Path, records: list[dict]) -> None:
    frame = pd.DataFrame(records, columns=MANIFEST_COLUMNS)
    atomic_write_bytes(path, frame.to_csv(index=False, lineterminator="\n").encode("utf-8"))


def read_manifest(path: Path) -> pd.DataFrame:
    if not Path(path).is_file():
        raise DataError(f"manifeste introuvable: {path}")
    frame = pd.read_csv(path, dtype={"scan_id": str, "label_path": str, "image_path": str},
                        keep_default_na=False, encoding="utf-8")
    missing = set(MANIFEST_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"{path}: colonnes manquantes {sorted(missing)}")
    return frame


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class DatasetInfo:
    """Contenu de `dataset.json` : ce que la config d'entraînement doit respecter."""

    n_classes: int
    native_size: int
    source_kind: str
    target_kind: str
    config_hash: str = ""


DATASET_INFO = "dataset.json"


def write_dataset_info(root: Path, info: DatasetInfo) -> None:
    payload = json.dumps(asdict(info), sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(Path(root) / DATASET_INFO, payload.encode("utf-8"))


def read_dataset_info(root: Path) -> DatasetInfo:
    path = Path(root) / DATASET_INFO
    if not path.is_file():
        raise DataError(f"jeu de données introuvable (pas de {DATASET_INFO}) : {root}")
    try:
        return DatasetInfo(**json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataError(f"{path}: description illisible ({exc})") from exc


def dataset_hash(root: Path) -> str:
    """Empreinte des manifestes d'entraînement / validation (le split d'évaluation est exclu)."""
    digest = hashlib.sha256()
    for rel in (DATASET_INFO, "train/manifest.csv", "val/manifest.csv"):
        path = Path(root) / rel
        if path.is_file():
            digest.update(rel.encode("utf-8"))
            digest.update(path.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------
# Lecture auditée
# ---------------------------------------------------------------------
class DatasetReader:
    """Lit un split via son manifeste ; n'ouvre jamais le sous-arbre `eval_only/`."""

    def __init__(self, root: Path, n_classes: int) -> None:
        self.root = Path(root)
        self.n_classes = n_classes
        self.opened: list[Path] = []

    def _open(self, rel: str) -> Path:
        path = self.root / rel
        if EVAL_ONLY_DIR in Path(rel).parts:
            raise DataError(f"accès refusé hors évaluation: {rel}")
        self.opened.append(path)
        return path

    def manifest_path(self, split: str) -> Path:
        return self.root / split / "manifest.csv"

    def load_split(self, split: str, modality: Modality, with_labels: bool) -> list[Scan]:
        if split == EVAL_ONLY_DIR:
            raise DataError("le split eval_only n'est lisible que par EvalStore")
        frame = read_manifest(self.manifest_path(split))
        frame = frame[frame["modality"] == modality.value]
        return _scans_from_frame(frame, modality, with_labels, self._open, self.n_classes)


class EvalStore:
    """Seul accès autorisé aux labels du domaine cible (évaluation / oracle supervisé)."""

    def __init__(self, root: Path, n_classes: int) -> None:
        self.root = Path(root)
        self.n_classes = n_classes
        self.opened: list[Path] = []

    def _open(self, rel: str) -> Path:
        path = self.root / rel
        self.opened.append(path)
        return path

    def available(self) -> bool:
        return (self.root / EVAL_ONLY_DIR / "manifest.csv").is_file()

    def target_scans(self) -> list[Scan]:
        """Images cible + labels cible, appariés par sujet et coupe."""
        path = self.root / EVAL_ONLY_DIR / "manifest.csv"
        if not path.is_file():
            raise DataError(f"labels d'évaluation absents: {path}")
        logger.info("lecture du magasin d'évaluation %s", path)
        frame = read_manifest(path)
        return _scans_from_frame(frame, Modality.TARGET, True, self._open, self.n_classes)


def _scans_from_frame(frame: pd.DataFrame, modality: Modality, with_labels: bool, opener,
                      n_classes: int) -> list[Scan]:
    scans: list[Scan] = []
    for scan_id, rows in frame.groupby("scan_id", sort=True):
        rows = rows.sort_values("slice_index")
        images: list[IntensityImage] = []
        labels: list[LabelMap] = []
        for row in rows.itertuples(index=False):
            spacing = (float(row.spacing_row_mm), float(row.spacing_col_mm))
            pixels = read_image_pgm(opener(row.image_path))
            images.append(IntensityImage(pixels, modality, spacing, str(scan_id),
                                         int(row.slice_index)))
            if with_labels:
                if not row.label_path:
                    raise DataError(f"{scan_id}: label manquant coupe {row.slice_index}")
                labels.append(LabelMap(read_label_pgm(opener(row.label_path)), n_classes, spacing))
        scans.append(Scan(str(scan_id), modality, images, labels if with_labels else None))
    if not scans:
        raise DataError(f"aucun sujet {modality.value} dans le manifeste")
    return scans
