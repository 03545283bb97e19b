# -*- coding: utf-8 -*-
"""
CrossSeg — Module checkpoint
Objectif: Format binaire `SSN1` (paramètres + moments Adam + états RNG) et écriture atomique.

Disposition (petit-boutiste) :
  b"SSN1" | u32 version | u32 len(meta) | meta JSON UTF-8 (clés triées)
  u32 n_arrays | n × (u32 len(nom) | nom UTF-8 | u32 ndim | ndim × u32 dims)
  blobs fp32 dans l'ordre de la table (noms triés)
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from modules.data import atomic_write_bytes
from modules.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"SSN1"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config_hash: str
    epoch: int
    variant: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tableaux `prefix/...` sans le préfixe (ex. `G1` → état du générateur)."""
        head = prefix.rstrip("/") + "/"
        return {k[len(head):]: v for k, v in self.arrays.items() if k.startswith(head)}

    def has_group(self, prefix: str) -> bool:
        head = prefix.rstrip("/") + "/"
        return any(k.startswith(head) for k in self.arrays)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    meta.update(config_hash=ckpt.config_hash, epoch=int(ckpt.epoch), variant=ckpt.variant)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(ckpt.arrays)
    parts = [MAGIC, _U32.pack(ckpt.version), _U32.pack(len(meta_bytes)), meta_bytes,
             _U32.pack(len(names))]
    blobs = []
    for name in names:
        arr = np.asarray(ckpt.arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        blobs.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts + blobs)


class _Reader:
    def __init__(self, payload: bytes, source: str) -> None:
        self.payload, self.pos, self.source = payload, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise CheckpointError(f"{self.source}: checkpoint tronqué (octet {self.pos})")
        chunk = self.payload[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(payload: bytes, source: str = "<checkpoint>") -> Checkpoint:
    r = _Reader(payload, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: magic invalide (SSN1 attendu)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: version de format inconnue {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: métadonnées illisibles ({exc})") from exc
    table = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        blob = r.take(4 * count)
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - r.pos} octets excédentaires")
    try:
        config_hash, epoch, variant = meta.pop("config_hash"), meta.pop("epoch"), meta.pop("variant")
    except KeyError as exc:
        raise CheckpointError(f"{source}: champ de métadonnées manquant {exc}") from exc
    return Checkpoint(config_hash, int(epoch), variant, arrays, meta, version)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(ckpt))
    logger.info("checkpoint écrit: %s (époque %d, %d tableaux)", path, ckpt.epoch,
                len(ckpt.arrays))
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint introuvable: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def checkpoint_name(epoch: int, stage: str = "") -> str:
    prefix = f"{stage}_" if stage else ""
    return f"{prefix}epoch_{epoch:04d}.ckpt"


def list_checkpoints(directory: Path, stage: str = "") -> list[Path]:
    """Checkpoints d'un répertoire triés par époque croissante."""
    prefix = f"{stage}_" if stage else ""
    return sorted(p for p in Path(directory).glob(f"{prefix}epoch_*.ckpt"))
