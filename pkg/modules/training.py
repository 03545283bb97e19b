# -*- coding: utf-8 -*-
"""
CrossSeg — Module training
Objectif: Graphe d'entraînement synthèse + segmentation (chemins A et B), les quatre variantes
(SYNSEG, HC, TWO_STAGE, SEG_ONLY), sélection d'époque et inférence.

Points clés:
- Une itération = phase 1 (G₁, G₂, Seg mis à jour ensemble, discriminateurs gelés) puis
  phase 2 (D₁ puis D₂, une mise à jour chacun, sur des faux tirés de l'historique).
- Seg ne voit que l'image synthétique G₁(x), jamais x.
- Les réseaux travaillent dans [−1, 1] (sortie tanh) ; les images stockées sont dans [0, 1].
- Toute l'aléa passe par des sous-flux nommés : `init.<réseau>`, `sampler`, `pool.<D>`.
- Les variantes SYNSEG / HC / TWO_STAGE ne lisent jamais les labels cible ; SEG_ONLY et la
  politique de sélection `target_labels` passent explicitement par `EvalStore`.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np
import pandas as pd

from modules.checkpoint import (
    Checkpoint,
    checkpoint_name,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from modules.config import RunConfig, TrainConfig
from modules.data import (
    DatasetReader,
    EvalStore,
    IntensityImage,
    LabelMap,
    Modality,
    SampledBatch,
    Scan,
    SlicePool,
    atomic_write_bytes,
    dataset_hash,
    normalize,
    read_dataset_info,
    resample_bilinear,
    resample_nearest,
    resample_scan,
    unpaired_sampler,
)
from modules.errors import CheckpointError, DataError, NumericError, ShapeError, TrainingError
from modules.losses import (
    LossParts,
    cycle_loss,
    gan_loss_discriminator,
    gan_loss_generator,
    seg_loss,
    total_loss,
)
from modules.metrics import dice
from modules.networks import Network, build_discriminator, build_generator, build_segmenter
from modules.optim import AdamState, adam_init, adam_step
from modules.rng import get_state, set_state, stream
from modules.tensor import Tape, Tensor, backward, mul

logger = logging.getLogger(__name__)

ROLES_BY_VARIANT: dict[str, tuple[str, ...]] = {
    "SYNSEG": ("G1", "G2", "D1", "D2", "Seg"),
    "HC": ("G1", "D1", "Seg"),
    "CYCLEGAN": ("G1", "G2", "D1", "D2"),
    "SEG_ONLY": ("Seg",),
    "SEG_ON_SYNTHETIC": ("G1", "Seg"),
}
TRAINED_ROLES: dict[str, tuple[str, ...]] = {
    "SEG_ON_SYNTHETIC": ("Seg",),
}
LOSS_COLUMNS = ["stage", "epoch", "step", "gan_g1", "gan_g2", "cycle_s", "cycle_t", "seg",
                "total", "d1", "d2"]
INFER_CHUNK = 8


def to_network_range(images: np.ndarray) -> np.ndarray:
    """[0, 1] → [−1, 1]."""
    return (2.0 * np.asarray(images, dtype=np.float32) - 1.0).astype(np.float32)


def from_network_range(images: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(images, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------
# Historique de faux (discriminateurs)
# ---------------------------------------------------------------------
class ImagePool:
    """Historique de capacité fixe : au-delà du remplissage, une chance sur deux de renvoyer
    une ancienne image (remplacée par la nouvelle). Capacité 0 = désactivé."""

    def __init__(self, capacity: int, rng: np.random.Generator) -> None:
        if capacity < 0:
            raise ShapeError(f"capacité d'historique négative: {capacity}")
        self.capacity = capacity
        self.rng = rng
        self.images: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.images)

    def query(self, images: np.ndarray) -> np.ndarray:
        if self.capacity == 0:
            return images
        out = []
        for img in images:
            if len(self.images) < self.capacity:
                self.images.append(img.copy())
                out.append(img)
            elif self.rng.random() < 0.5:
                idx = int(self.rng.integers(0, self.capacity))
                out.append(self.images[idx])
                self.images[idx] = img.copy()
            else:
                out.append(img)
        return np.stack(out).astype(images.dtype)


# ---------------------------------------------------------------------
# État
# ---------------------------------------------------------------------
@dataclass
class TrainerState:
    config: TrainConfig
    mode: str
    nets: dict[str, Network]
    optims: dict[str, AdamState]
    pools: dict[str, ImagePool] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    history: list[dict[str, float]] = field(default_factory=list)


def build_network(role: str, cfg: TrainConfig) -> Network:
    rng = stream(cfg.seed, f"init.{role}")
    if role.startswith("G"):
        return build_generator(cfg.generator, rng, cfg.init_std)
    if role.startswith("D"):
        d = cfg.discriminator
        return build_discriminator(d.base_filters, d.n_layers, rng, d.in_channels, cfg.init_std)
    if role == "Seg":
        return build_segmenter(cfg.segmenter, rng, cfg.init_std)
    raise TrainingError(f"rôle de réseau inconnu: {role}")


def build_state(cfg: TrainConfig, mode: str | None = None) -> TrainerState:
    """Réseaux + Adam (+ historiques pour chaque D) du mode demandé (variante par défaut)."""
    mode = mode or cfg.variant
    if mode not in ROLES_BY_VARIANT:
        raise TrainingError(f"mode d'entraînement inconnu: {mode}")
    roles = ROLES_BY_VARIANT[mode]
    nets = {role: build_network(role, cfg) for role in roles}
    optims = {}
    for role in TRAINED_ROLES.get(mode, roles):
        lr = cfg.lr_disc if role.startswith("D") else cfg.lr_gen
        optims[role] = adam_init(nets[role], lr)
    pools = {role: ImagePool(cfg.history_buffer, stream(cfg.seed, f"pool.{role}"))
             for role in roles if role.startswith("D")}
    return TrainerState(cfg, mode, nets, optims, pools)


# ---------------------------------------------------------------------
# Itérations
# ---------------------------------------------------------------------
def _check_batch(batch: SampledBatch, needs_y: bool = True) -> None:
    if batch.x.ndim != 4 or batch.x.shape[1] != 1:
        raise ShapeError(f"lot x en N×1×H×W attendu, reçu {batch.x.shape}")
    if batch.labels.shape != (batch.x.shape[0],) + batch.x.shape[2:]:
        raise ShapeError(f"labels {batch.labels.shape} incompatibles avec x {batch.x.shape}")
    if needs_y and batch.y.shape[1:] != batch.x.shape[1:]:
        raise ShapeError(f"lots x {batch.x.shape} et y {batch.y.shape} incompatibles")


def _ensure_finite(value: Tensor, step: int, what: str) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NumericError(f"perte {what} non finie", step)


def _record(state: TrainerState, parts: LossParts, d_losses: dict[str, float]) -> dict[str, float]:
    """Composantes + total recalculé exactement comme Σ λᵢ·partieᵢ (même arithmétique que le CSV)."""
    values = parts.as_floats()
    weights = state.config.weights.as_tuple()
    total = sum(lam * v for lam, v in zip(weights, values.values(), strict=True))
    row: dict[str, float] = {"epoch": state.epoch, "step": state.step, **values, "total": total}
    row["d1"] = d_losses.get("D1", 0.0)
    row["d2"] = d_losses.get("D2", 0.0)
    state.history.append(row)
    return row


def _generator_update(state: TrainerState, parts_fn: Callable[[], LossParts],
                      trained: Sequence[str], frozen: Sequence[str]) -> tuple[LossParts, Tensor]:
    """Phase 1 : zéro-grad, passe avant sous bande (D gelés), rétropropagation, Adam."""
    for role in trained:
        state.nets[role].zero_grad()
    with contextlib.ExitStack() as stack:
        for role in frozen:
            stack.enter_context(state.nets[role].frozen())
        with Tape():
            parts = parts_fn()
            total = total_loss(parts, state.config.weights)
            _ensure_finite(total, state.step, "générateur")
            backward(total)
    for role in trained:
        adam_step(state.optims[role], state.nets[role])
    return parts, total


def _discriminator_update(state: TrainerState, role: str, real: np.ndarray, fake: np.ndarray,
                          weight: float) -> float:
    """Phase 2 pour un discriminateur ; la perte est pondérée par le λ de son terme adversarial."""
    d = state.nets[role]
    d.zero_grad()
    fake = state.pools[role].query(fake)
    with Tape():
        loss = gan_loss_discriminator(d(Tensor(real)), d(Tensor(fake)), state.config.gan_form)
        _ensure_finite(loss, state.step, f"discriminateur {role}")
        backward(mul(loss, weight))
    adam_step(state.optims[role], d)
    return loss.item()


def train_step_synseg(state: TrainerState, batch: SampledBatch) -> dict[str, float]:
    """Chemins A (x → G₁ → {D₁, Seg, G₂}) et B (y → G₂ → {D₂, G₁}), puis D₁ et D₂."""
    if state.mode != "SYNSEG":
        raise TrainingError(f"train_step_synseg appelé en mode {state.mode}")
    _check_batch(batch)
    cfg = state.config
    w, form = cfg.weights, cfg.gan_form
    g1, g2, seg = state.nets["G1"], state.nets["G2"], state.nets["Seg"]
    d1, d2 = state.nets["D1"], state.nets["D2"]
    x, y = Tensor(batch.x), Tensor(batch.y)
    state.step += 1
    fakes: dict[str, Tensor] = {}

    def parts_fn() -> LossParts:
        fake_t = g1(x)
        rec_x = g2(fake_t)
        seg_logp = seg(fake_t)
        fake_s = g2(y)
        rec_y = g1(fake_s)
        fakes.update(t=fake_t, s=fake_s)
        return LossParts(
            gan_g1=gan_loss_generator(d1(fake_t), form),
            gan_g2=gan_loss_generator(d2(fake_s), form),
            cycle_s=cycle_loss(rec_x, x),
            cycle_t=cycle_loss(rec_y, y),
            seg=seg_loss(seg_logp, batch.labels, cfg.class_weights),
        )

    parts, _ = _generator_update(state, parts_fn, ("G1", "G2", "Seg"), ("D1", "D2"))
    d_losses = {
        "D1": _discriminator_update(state, "D1", batch.y, fakes["t"].data, w.lambda1),
        "D2": _discriminator_update(state, "D2", batch.x, fakes["s"].data, w.lambda2),
    }
    return _record(state, parts, d_losses)


def train_step_hc(state: TrainerState, batch: SampledBatch) -> dict[str, float]:
    """Demi-cycle : G₁, D₁ et Seg seulement ; λ₂, λ₃, λ₄ structurellement absents."""
    if state.mode != "HC":
        raise TrainingError(f"train_step_hc appelé en mode {state.mode}")
    _check_batch(batch)
    cfg = state.config
    g1, seg, d1 = state.nets["G1"], state.nets["Seg"], state.nets["D1"]
    x = Tensor(batch.x)
    state.step += 1
    fakes: dict[str, Tensor] = {}

    def parts_fn() -> LossParts:
        fake_t = g1(x)
        fakes["t"] = fake_t
        return LossParts(
            gan_g1=gan_loss_generator(d1(fake_t), cfg.gan_form),
            seg=seg_loss(seg(fake_t), batch.labels, cfg.class_weights),
        )

    parts, _ = _generator_update(state, parts_fn, ("G1", "Seg"), ("D1",))
    d_losses = {"D1": _discriminator_update(state, "D1", batch.y, fakes["t"].data,
                                            cfg.weights.lambda1)}
    return _record(state, parts, d_losses)


def train_step_cyclegan(state: TrainerState, batch: SampledBatch) -> dict[str, float]:
    """Étape 1 de TWO_STAGE : CycleGAN pur (pas de Seg, λ₅ sans objet)."""
    if state.mode != "CYCLEGAN":
        raise TrainingError(f"train_step_cyclegan appelé en mode {state.mode}")
    _check_batch(batch)
    cfg = state.config
    form = cfg.gan_form
    g1, g2, d1, d2 = (state.nets[r] for r in ("G1", "G2", "D1", "D2"))
    x, y = Tensor(batch.x), Tensor(batch.y)
    state.step += 1
    fakes: dict[str, Tensor] = {}

    def parts_fn() -> LossParts:
        fake_t, fake_s = g1(x), g2(y)
        fakes.update(t=fake_t, s=fake_s)
        return LossParts(
            gan_g1=gan_loss_generator(d1(fake_t), form),
            gan_g2=gan_loss_generator(d2(fake_s), form),
            cycle_s=cycle_loss(g2(fake_t), x),
            cycle_t=cycle_loss(g1(fake_s), y),
        )

    parts, _ = _generator_update(state, parts_fn, ("G1", "G2"), ("D1", "D2"))
    d_losses = {
        "D1": _discriminator_update(state, "D1", batch.y, fakes["t"].data, cfg.weights.lambda1),
        "D2": _discriminator_update(state, "D2", batch.x, fakes["s"].data, cfg.weights.lambda2),
    }
    return _record(state, parts, d_losses)


def train_step_segmenter(state: TrainerState, batch: SampledBatch) -> dict[str, float]:
    """Entropie croisée seule sur `batch.x` (synthétique figé ou cible réelle selon le mode)."""
    if state.mode not in ("SEG_ONLY", "SEG_ON_SYNTHETIC"):
        raise TrainingError(f"train_step_segmenter appelé en mode {state.mode}")
    _check_batch(batch, needs_y=False)
    cfg = state.config
    seg = state.nets["Seg"]
    x = Tensor(batch.x)
    state.step += 1
    def parts_fn() -> LossParts:
        return LossParts(seg=seg_loss(seg(x), batch.labels, cfg.class_weights))

    parts, _ = _generator_update(state, parts_fn, ("Seg",), ())
    return _record(state, parts, {})


STEP_FUNCTIONS: dict[str, Callable[[TrainerState, SampledBatch], dict[str, float]]] = {
    "SYNSEG": train_step_synseg,
    "HC": train_step_hc,
    "CYCLEGAN": train_step_cyclegan,
    "SEG_ONLY": train_step_segmenter,
    "SEG_ON_SYNTHETIC": train_step_segmenter,
}


# ---------------------------------------------------------------------
# Données d'entraînement
# ---------------------------------------------------------------------
@dataclass
class TrainingData:
    source: SlicePool
    target: SlicePool
    source_val: list[Scan] = field(default_factory=list)
    dataset_hash: str = ""


def prepare_scans(scans: Sequence[Scan], size: int) -> list[Scan]:
    return [resample_scan(s, size) for s in scans]


def load_training_data(root: Path, cfg: TrainConfig) -> tuple[TrainingData, DatasetReader]:
    """Split `train/` (sources étiquetées, cibles sans label) + `val/` ; jamais `eval_only/`."""
    info = read_dataset_info(root)
    if info.n_classes != cfg.n_classes:
        raise DataError(f"jeu de données à {info.n_classes} classes, config à {cfg.n_classes}")
    reader = DatasetReader(root, cfg.n_classes)
    source = prepare_scans(reader.load_split("train", Modality.SOURCE, True), cfg.image_size)
    target = prepare_scans(reader.load_split("train", Modality.TARGET, False), cfg.image_size)
    val: list[Scan] = []
    if reader.manifest_path("val").is_file():
        val = prepare_scans(reader.load_split("val", Modality.SOURCE, True), cfg.image_size)
    data = TrainingData(SlicePool.from_scans(source, True), SlicePool.from_scans(target, False),
                        val, dataset_hash(root))
    logger.info("données: %d coupes source, %d coupes cible, %d sujets de validation",
                len(data.source), len(data.target), len(val))
    return data, reader


def _network_pool(pool: SlicePool) -> SlicePool:
    return SlicePool(to_network_range(pool.images), pool.labels, pool.owners)


def steps_per_epoch(cfg: TrainConfig, n_slices: int) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, math.ceil(n_slices / cfg.batch))


def _single_pool_sampler(pool: SlicePool, batch: int, rng: np.random.Generator
                         ) -> Iterator[SampledBatch]:
    """Échantillonneur uniforme sur un seul domaine étiqueté (segmenteur seul)."""
    if len(pool) == 0 or pool.labels is None:
        raise DataError("pool étiqueté vide")
    while True:
        idx = rng.integers(0, len(pool), size=batch)
        x = pool.images[idx][:, None]
        yield SampledBatch(x=x, y=x, labels=pool.labels[idx], x_index=idx, y_index=idx)


# ---------------------------------------------------------------------
# Checkpoints de l'état
# ---------------------------------------------------------------------
def state_to_checkpoint(state: TrainerState, config_hash: str, variant: str,
                        rngs: dict[str, np.random.Generator], stage: int = 1) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for role, net in state.nets.items():
        for name, arr in net.state_dict().items():
            arrays[f"{role}/{name}"] = arr
    adam_meta = {}
    for role, opt in state.optims.items():
        for name in opt.m:
            arrays[f"adam/{role}/{name}/m"] = opt.m[name]
            arrays[f"adam/{role}/{name}/v"] = opt.v[name]
        adam_meta[role] = {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                           "eps": opt.eps}
    for role, pool in state.pools.items():
        for i, img in enumerate(pool.images):
            arrays[f"pool/{role}/{i:04d}"] = img
    rng_states = {name: get_state(rng) for name, rng in rngs.items()}
    rng_states.update({f"pool.{role}": get_state(p.rng) for role, p in state.pools.items()})
    meta = {
        "mode": state.mode,
        "stage": stage,
        "step": state.step,
        "roles": list(state.nets),
        "image_size": state.config.image_size,
        "n_classes": state.config.n_classes,
        "adam": adam_meta,
        "rng": rng_states,
    }
    return Checkpoint(config_hash, state.epoch, variant, arrays, meta)


def restore_state(state: TrainerState, ckpt: Checkpoint,
                  rngs: dict[str, np.random.Generator] | None = None) -> None:
    """Recharge réseaux, moments Adam, historiques et flux aléatoires (reprise à l'identique)."""
    for role, net in state.nets.items():
        if not ckpt.has_group(role):
            raise CheckpointError(f"réseau {role} absent du checkpoint")
        net.load_state_dict(ckpt.group(role))
    for role, opt in state.optims.items():
        meta = ckpt.meta.get("adam", {}).get(role)
        if meta is None:
            raise CheckpointError(f"état Adam de {role} absent du checkpoint")
        opt.t, opt.lr = int(meta["t"]), float(meta["lr"])
        for name in opt.m:
            opt.m[name] = ckpt.arrays[f"adam/{role}/{name}/m"].copy()
            opt.v[name] = ckpt.arrays[f"adam/{role}/{name}/v"].copy()
    for role, pool in state.pools.items():
        stored = ckpt.group(f"pool/{role}")
        pool.images = [stored[k].copy() for k in sorted(stored)]
        set_state(pool.rng, ckpt.meta["rng"][f"pool.{role}"])
    for name, rng in (rngs or {}).items():
        set_state(rng, ckpt.meta["rng"][name])
    state.epoch = ckpt.epoch
    state.step = int(ckpt.meta.get("step", 0))


def load_network(ckpt: Checkpoint, role: str, cfg: TrainConfig) -> Network:
    """Reconstruit un réseau du checkpoint (contrôle taille d'image et nombre de classes)."""
    if ckpt.meta.get("n_classes") != cfg.n_classes or ckpt.meta.get("image_size") != cfg.image_size:
        raise DataError(
            f"checkpoint ({ckpt.meta.get('image_size')} px, {ckpt.meta.get('n_classes')} classes) "
            f"incompatible avec la config ({cfg.image_size} px, {cfg.n_classes} classes)"
        )
    if not ckpt.has_group(role):
        raise CheckpointError(f"réseau {role} absent du checkpoint (époque {ckpt.epoch})")
    net = build_network(role, cfg)
    net.load_state_dict(ckpt.group(role))
    return net


# ---------------------------------------------------------------------
# Boucle d'époques
# ---------------------------------------------------------------------
@dataclass
class RunPaths:
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def losses(self) -> Path:
        return self.root / "losses.csv"

    @property
    def manifest(self) -> Path:
        return self.root / "run_manifest.json"


def _write_losses(path: Path, rows: list[dict[str, float]]) -> None:
    frame = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    atomic_write_bytes(path, frame.to_csv(index=False, lineterminator="\n").encode("utf-8"))


def read_losses(path: Path) -> pd.DataFrame:
    if not Path(path).is_file():
        return pd.DataFrame(columns=LOSS_COLUMNS)
    return pd.read_csv(path, float_precision="round_trip")


def _fit(state: TrainerState, sampler: Iterator[SampledBatch], n_steps: int, epochs: int,
         paths: RunPaths, config_hash: str, variant: str, rngs: dict[str, np.random.Generator],
         stage: int, stage_name: str, prior_rows: list[dict[str, float]]) -> list[Path]:
    """Époques `state.epoch + 1 … epochs` ; checkpoint toutes les `eval_every` époques et à la fin."""
    step_fn = STEP_FUNCTIONS[state.mode]
    cfg = state.config
    rows = list(prior_rows)
    saved = []
    for epoch in range(state.epoch + 1, epochs + 1):
        state.epoch = epoch
        started = len(state.history)
        for _ in range(n_steps):
            row = step_fn(state, next(sampler))
            row["stage"] = stage
            rows.append(row)
            logger.debug("étape %d: total=%.5f", state.step, row["total"])
        epoch_rows = pd.DataFrame(state.history[started:])
        logger.info(
            "[%s] époque %d/%d — total=%.4f seg=%.4f cyc=%.4f/%.4f adv=%.4f/%.4f",
            variant, epoch, epochs, epoch_rows["total"].mean(), epoch_rows["seg"].mean(),
            epoch_rows["cycle_s"].mean(), epoch_rows["cycle_t"].mean(),
            epoch_rows["gan_g1"].mean(), epoch_rows["gan_g2"].mean(),
        )
        if epoch % cfg.eval_every == 0 or epoch == epochs:
            ckpt = state_to_checkpoint(state, config_hash, variant, rngs, stage)
            saved.append(save_checkpoint(paths.checkpoints / checkpoint_name(epoch, stage_name), ckpt))
            _write_losses(paths.losses, rows)
    return saved


def _resume(state: TrainerState, paths: RunPaths, stage_name: str, config_hash: str,
            rngs: dict[str, np.random.Generator], stage: int,
            rows: list[dict[str, float]]) -> list[dict[str, float]]:
    """Reprend au dernier checkpoint de l'étape ; tronque l'historique des pertes en conséquence."""
    existing = list_checkpoints(paths.checkpoints, stage_name)
    if not existing:
        return [r for r in rows if int(r["stage"]) < stage]
    ckpt = load_checkpoint(existing[-1])
    if ckpt.config_hash != config_hash:
        raise CheckpointError(
            f"{existing[-1]}: empreinte de config {ckpt.config_hash[:12]} ≠ {config_hash[:12]}"
        )
    restore_state(state, ckpt, rngs)
    logger.info("reprise depuis %s (époque %d, étape %d)", existing[-1].name, state.epoch,
                state.step)
    return [r for r in rows if int(r["stage"]) < stage
            or (int(r["stage"]) == stage and int(r["epoch"]) <= ckpt.epoch)]


def _previous_rows(paths: RunPaths) -> list[dict[str, float]]:
    return read_losses(paths.losses).to_dict("records")


def train_joint(run: RunConfig, data: TrainingData, paths: RunPaths) -> list[Path]:
    """SYNSEG ou HC : une seule étape, bout en bout."""
    cfg = run.train
    if cfg.variant not in ("SYNSEG", "HC"):
        raise TrainingError(f"train_joint ne couvre pas la variante {cfg.variant}")
    state = build_state(cfg)
    rngs = {"sampler": stream(cfg.seed, "sampler")}
    rows = _resume(state, paths, "", run.hash, rngs, 1, _previous_rows(paths))
    sampler = unpaired_sampler(_network_pool(data.source), _network_pool(data.target), cfg.batch,
                               rngs["sampler"])
    n_steps = steps_per_epoch(cfg, max(len(data.source), len(data.target)))
    _fit(state, sampler, n_steps, cfg.epochs, paths, run.hash, cfg.variant, rngs, 1, "", rows)
    return list_checkpoints(paths.checkpoints)


def synthesize(g1: Network, images: np.ndarray) -> np.ndarray:
    """G₁ appliqué hors bande à une pile (S, H, W) en [−1, 1] ; renvoie (S, 1, H, W)."""
    out = []
    for start in range(0, len(images), INFER_CHUNK):
        chunk = Tensor(images[start:start + INFER_CHUNK][:, None])
        out.append(g1(chunk).data)
    return np.concatenate(out).astype(np.float32)


def train_two_stage(run: RunConfig, data: TrainingData, paths: RunPaths) -> list[Path]:
    """Étape 1 : CycleGAN seul. Étape 2 : G₁ figé, Seg neuf entraîné sur (G₁(x), label de x)."""
    cfg = run.train
    if cfg.variant != "TWO_STAGE":
        raise TrainingError(f"train_two_stage appelé pour {cfg.variant}")
    stage1 = build_state(cfg, "CYCLEGAN")
    rngs = {"sampler": stream(cfg.seed, "sampler")}
    rows = _resume(stage1, paths, "stage1", run.hash, rngs, 1, _previous_rows(paths))
    if stage1.epoch < cfg.epochs:
        sampler = unpaired_sampler(_network_pool(data.source), _network_pool(data.target),
                                   cfg.batch, rngs["sampler"])
        n_steps = steps_per_epoch(cfg, max(len(data.source), len(data.target)))
        _fit(stage1, sampler, n_steps, cfg.epochs, paths, run.hash, "TWO_STAGE", rngs, 1,
             "stage1", rows)
    return train_two_stage_segmenter(run, data, paths)


def train_two_stage_segmenter(run: RunConfig, data: TrainingData, paths: RunPaths) -> list[Path]:
    """Étape 2 seule ; exige le checkpoint final de l'étape 1."""
    cfg = run.train
    stage1 = [p for p in list_checkpoints(paths.checkpoints, "stage1")
              if load_checkpoint(p).epoch == cfg.epochs]
    if not stage1:
        raise CheckpointError(f"étape 2 impossible : aucun checkpoint final d'étape 1 dans "
                              f"{paths.checkpoints}")
    g1 = load_network(load_checkpoint(stage1[-1]), "G1", cfg)
    state = build_state(cfg, "SEG_ON_SYNTHETIC")
    state.nets["G1"] = g1
    synthetic = synthesize(g1, to_network_range(data.source.images))[:, 0]
    pool = SlicePool(synthetic, data.source.labels, data.source.owners)
    logger.info("étape 2: %d images synthétiques matérialisées (G₁ figé, empreinte %s)",
                len(pool), g1.checksum()[:12])
    rngs = {"sampler": stream(cfg.seed, "sampler.stage2")}
    rows = _resume(state, paths, "", run.hash, rngs, 2, _previous_rows(paths))
    sampler = _single_pool_sampler(pool, cfg.batch, rngs["sampler"])
    _fit(state, sampler, steps_per_epoch(cfg, len(pool)), cfg.epochs, paths, run.hash,
         "TWO_STAGE", rngs, 2, "", rows)
    return list_checkpoints(paths.checkpoints)


def target_training_pool(store: EvalStore, size: int) -> SlicePool:
    """Images + labels cible (mode oracle uniquement)."""
    if not store.available():
        raise DataError("SEG_ONLY: labels du domaine cible absents (eval_only/ manquant)")
    scans = prepare_scans(store.target_scans(), size)
    return SlicePool.from_scans(scans, with_labels=True)


def train_seg_only(run: RunConfig, pool: SlicePool, paths: RunPaths) -> list[Path]:
    """Segmentation supervisée sur images cible réelles + labels cible (borne haute)."""
    cfg = run.train
    if cfg.variant != "SEG_ONLY":
        raise TrainingError(f"train_seg_only appelé pour {cfg.variant}")
    if pool.labels is None:
        raise DataError("SEG_ONLY: labels cible manquants")
    state = build_state(cfg)
    rngs = {"sampler": stream(cfg.seed, "sampler")}
    rows = _resume(state, paths, "", run.hash, rngs, 1, _previous_rows(paths))
    sampler = _single_pool_sampler(_network_pool(pool), cfg.batch, rngs["sampler"])
    _fit(state, sampler, steps_per_epoch(cfg, len(pool)), cfg.epochs, paths, run.hash,
         "SEG_ONLY", rngs, 1, "", rows)
    return list_checkpoints(paths.checkpoints)


# ---------------------------------------------------------------------
# Inférence
# ---------------------------------------------------------------------
def segment_network_size(seg: Network, images: np.ndarray, route: Network | None = None
                         ) -> np.ndarray:
    """Argmax par pixel d'une pile (S, H, W) en [0, 1] déjà à la taille réseau."""
    x = to_network_range(images)
    out = []
    for start in range(0, len(x), INFER_CHUNK):
        chunk = Tensor(x[start:start + INFER_CHUNK][:, None])
        if route is not None:
            chunk = route(chunk)
        out.append(np.argmax(seg(chunk).data, axis=1))
    return np.concatenate(out).astype(np.int64)


def infer(seg: Network, volume: np.ndarray, image_size: int, kind: str | None = None,
          native_size: tuple[int, int] | None = None,
          spacing_mm: tuple[float, float] = (1.0, 1.0)) -> list[LabelMap]:
    """normalisation → bilinéaire vers la taille réseau → argmax → plus proche voisin → pile."""
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim != 3:
        raise ShapeError(f"infer: volume (S, H, W) attendu, reçu {vol.shape}")
    if kind is not None:
        vol = normalize(vol, kind)
    h, w = native_size or vol.shape[1:]
    resized = np.stack([
        resample_bilinear(IntensityImage(s, Modality.TARGET, spacing_mm), image_size,
                          image_size).pixels
        for s in vol
    ])
    pred = segment_network_size(seg, resized)
    n_classes = seg.out_channels
    net_spacing = (spacing_mm[0] * vol.shape[1] / image_size, spacing_mm[1] * vol.shape[2] / image_size)
    return [resample_nearest(LabelMap(p, n_classes, net_spacing), h, w) for p in pred]


# ---------------------------------------------------------------------
# Sélection d'époque
# ---------------------------------------------------------------------
@dataclass
class ValidationSet:
    """Coupes à la taille réseau, labels, sujet de chaque coupe ; `synthetic` = passer par G₁."""

    images: np.ndarray
    labels: np.ndarray
    owners: list[str]
    synthetic: bool
    class_id: int = 1


def validation_from_scans(scans: Sequence[Scan], synthetic: bool, class_id: int) -> ValidationSet:
    if not scans:
        raise DataError("ensemble de validation vide")
    pool = SlicePool.from_scans(scans, with_labels=True)
    return ValidationSet(pool.images, pool.labels, pool.owners, synthetic, class_id)


def mean_subject_dice(pred: np.ndarray, truth: np.ndarray, owners: Sequence[str],
                      class_id: int) -> float:
    owners_arr = np.asarray(owners)
    scores = [dice(pred[owners_arr == sid], truth[owners_arr == sid], class_id)
              for sid in sorted(set(owners))]
    return float(np.mean(scores))


def make_scorer(cfg: TrainConfig) -> Callable[[Checkpoint, ValidationSet], float]:
    def score(ckpt: Checkpoint, validation: ValidationSet) -> float:
        seg = load_network(ckpt, "Seg", cfg)
        route = load_network(ckpt, "G1", cfg) if validation.synthetic else None
        pred = segment_network_size(seg, validation.images, route)
        return mean_subject_dice(pred, validation.labels, validation.owners, validation.class_id)

    return score


def select_epoch(checkpoints: Sequence[Any], validation: Any,
                 scorer: Callable[[Any, Any], float]) -> tuple[Any, list[float]]:
    """Checkpoint de DSC moyen maximal ; à égalité, la première époque l'emporte."""
    if not checkpoints:
        raise DataError("select_epoch: aucun checkpoint")
    if validation is None:
        raise DataError("select_epoch: ensemble de validation absent")
    ordered = sorted(checkpoints, key=lambda c: c.epoch)
    scores = [float(scorer(c, validation)) for c in ordered]
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return ordered[best], scores


# ---------------------------------------------------------------------
# Manifeste de run
# ---------------------------------------------------------------------
def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def read_run_manifest(path: Path) -> dict | None:
    if not Path(path).is_file():
        return None
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_run_manifest(path: Path, manifest: dict) -> None:
    """Refuse d'écraser un manifeste marqué `complete`."""
    existing = read_run_manifest(path)
    if existing is not None and existing.get("status") == "complete":
        raise TrainingError(f"{path}: run terminé, manifeste immuable")
    payload = json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    atomic_write_bytes(Path(path), payload.encode("utf-8"))


def epoch_summaries(losses: pd.DataFrame) -> list[dict[str, float]]:
    if losses.empty:
        return []
    cols = [c for c in LOSS_COLUMNS if c not in ("stage", "epoch", "step")]
    grouped = losses.groupby(["stage", "epoch"], sort=True)[cols].mean().reset_index()
    return [{k: (int(v) if k in ("stage", "epoch") else float(v)) for k, v in r.items()}
            for r in grouped.to_dict("records")]


@dataclass
class TrainingResult:
    run_dir: Path
    checkpoints: list[Path]
    selected: Path
    scores: list[float]
    policy: str
    manifest: dict


def _select(run: RunConfig, checkpoints: list[Path], data: TrainingData,
            store: EvalStore | None) -> tuple[Path, list[float], str]:
    cfg = run.train
    ckpts = [load_checkpoint(p) for p in checkpoints]
    by_epoch = dict(zip((c.epoch for c in ckpts), checkpoints, strict=True))
    policy = cfg.selection
    if policy == "fixed":
        wanted = cfg.fixed_epoch or cfg.epochs
        if wanted not in by_epoch:
            raise DataError(f"aucun checkpoint à l'époque fixée {wanted}")
        return by_epoch[wanted], [], policy
    if policy == "source_proxy" and cfg.variant != "SEG_ONLY" and data.source_val:
        validation = validation_from_scans(data.source_val, True, run.eval.organ_class)
    elif store is not None and store.available():
        if policy == "source_proxy":
            logger.warning("sélection: pas de proxy source pour %s, labels cible utilisés",
                           cfg.variant)
            policy = "target_labels"
        scans = prepare_scans(store.target_scans(), cfg.image_size)
        validation = validation_from_scans(scans, False, run.eval.organ_class)
    else:
        logger.warning("sélection: aucune donnée de validation, dernière époque retenue")
        return checkpoints[-1], [], "fixed"
    best, scores = select_epoch(ckpts, validation, make_scorer(cfg))
    logger.info("sélection (%s): époque %d, DSC moyens %s", policy, best.epoch,
                ", ".join(f"{s:.3f}" for s in scores))
    return by_epoch[best.epoch], scores, policy


def run_training(run: RunConfig, dataset_root: Path, out_dir: Path) -> TrainingResult:
    """Exécute la variante configurée (reprise automatique), sélectionne l'époque, écrit le manifeste."""
    cfg = run.train
    paths = RunPaths(Path(out_dir))
    existing = read_run_manifest(paths.manifest)
    if existing is not None and existing.get("status") == "complete":
        if existing.get("config_hash") != run.hash:
            raise TrainingError(f"{out_dir}: run terminé avec une autre configuration")
        logger.info("run déjà terminé dans %s", out_dir)
        return TrainingResult(paths.root, list_checkpoints(paths.checkpoints),
                              Path(existing["selection"]["checkpoint"]),
                              existing["selection"]["scores"], existing["selection"]["policy"],
                              existing)
    data, reader = load_training_data(dataset_root, cfg)
    store = EvalStore(dataset_root, cfg.n_classes)
    manifest: dict[str, Any] = {
        "status": "running",
        "variant": cfg.variant,
        "seed": cfg.seed,
        "config": run.raw,
        "config_hash": run.hash,
        "dataset": str(dataset_root),
        "dataset_manifest_hash": data.dataset_hash,
        "started_at": (existing or {}).get("started_at", _now()),
    }
    write_run_manifest(paths.manifest, manifest)
    if cfg.variant in ("SYNSEG", "HC"):
        checkpoints = train_joint(run, data, paths)
    elif cfg.variant == "TWO_STAGE":
        checkpoints = train_two_stage(run, data, paths)
    else:
        checkpoints = train_seg_only(run, target_training_pool(store, cfg.image_size), paths)
    manifest["training_files_opened"] = len(reader.opened)
    selected, scores, policy = _select(run, checkpoints, data, store)
    manifest.update(
        status="complete",
        finished_at=_now(),
        epochs=epoch_summaries(read_losses(paths.losses)),
        selection={"policy": policy, "checkpoint": str(selected), "scores": scores,
                   "epochs": [load_checkpoint(p).epoch for p in checkpoints]},
    )
    write_run_manifest(paths.manifest, manifest)
    return TrainingResult(paths.root, checkpoints, selected, scores, policy, manifest)


# ---------------------------------------------------------------------
# Montages
# ---------------------------------------------------------------------
def montage_panels(nets: dict[str, Network], x: np.ndarray, y: np.ndarray | None,
                   n_classes: int) -> dict[str, list[list[np.ndarray]]]:
    """Chemin A : x, G₁(x), G₂(G₁(x)), Seg(G₁(x)) ; chemin B : y, G₂(y), G₁(G₂(y)).
    Tuiles en [0, 1] ; la segmentation est mise à l'échelle id / (C − 1)."""
    panels: dict[str, list[list[np.ndarray]]] = {}
    g1 = nets["G1"]
    g2 = nets.get("G2")
    seg = nets.get("Seg")
    rows_a = []
    for img in x:
        t = Tensor(to_network_range(img)[None, None])
        fake_t = g1(t)
        row = [img, from_network_range(fake_t.data[0, 0])]
        if g2 is not None:
            row.append(from_network_range(g2(fake_t).data[0, 0]))
        if seg is not None:
            cls = np.argmax(seg(fake_t).data[0], axis=0)
            row.append(cls.astype(np.float32) / max(n_classes - 1, 1))
        rows_a.append(row)
    panels["path_a"] = rows_a
    if g2 is not None and y is not None:
        rows_b = []
        for img in y:
            t = Tensor(to_network_range(img)[None, None])
            fake_s = g2(t)
            rows_b.append([img, from_network_range(fake_s.data[0, 0]),
                           from_network_range(g1(fake_s).data[0, 0])])
        panels["path_b"] = rows_b
    return panels
