# -*- coding: utf-8 -*-
"""
CrossSeg — Module config
Objectif: Chargement de config.yaml, surcharges `section.clé=valeur`, empreinte SHA-256 et
conversion en dataclasses figées.

Points clés:
- Toute clé a une valeur par défaut (DEFAULTS) ; une clé inconnue est une ConfigError.
- Les surcharges sont interprétées avec les règles scalaires YAML (`10` → int, `true` → bool).
- L'empreinte porte sur le JSON canonique de la configuration résolue.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Sequence

import yaml

from modules.errors import ConfigError
from modules.losses import GAN_FORMS, LossWeights
from modules.networks import DiscriminatorConfig, GeneratorConfig
from modules.phantom import PhantomSpec

logger = logging.getLogger(__name__)

VARIANTS = ("SYNSEG", "HC", "TWO_STAGE", "SEG_ONLY")
SELECTION_POLICIES = ("source_proxy", "target_labels", "fixed")

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "phantom": {
        "n_source_scans": 20,
        "n_target_scans": 8,
        "n_val_scans": 4,
        "slices_per_scan": 16,
        "native_size": 96,
        "spacing_mm": 1.0,
        "source_kind": "mri",
        "body_radius": 0.45,
        "organ_radius_min": 0.15,
        "organ_radius_max": 0.25,
        "organ_jitter": 0.05,
        "slice_scale_min": 0.6,
        "n_confounders": 2,
        "confounder_radius": 0.06,
        "texture_amplitude": 0.08,
        "bias_amplitude": 0.2,
        "noise_std": 0.03,
    },
    "model": {
        "image_size": 64,
        "n_classes": 2,
        "gen_base_filters": 16,
        "n_res_blocks": 3,
        "disc_base_filters": 16,
        "disc_layers": 3,
        "init_std": 0.02,
    },
    "train": {
        "variant": "SYNSEG",
        "epochs": 100,
        "batch": 1,
        "lr_gen": 0.0001,
        "lr_disc": 0.0002,
        "lambda1": 1.0,
        "lambda2": 1.0,
        "lambda3": 10.0,
        "lambda4": 10.0,
        "lambda5": 1.0,
        "gan_form": "log",
        "history_buffer": 50,
        "eval_every": 10,
        "selection": "source_proxy",
        "fixed_epoch": 0,
        "class_weights": None,
        "steps_per_epoch": 0,
    },
    "eval": {
        "organ_class": 1,
        "all_classes": False,
        "slice_thickness_mm": 1.0,
    },
}


def load_yaml_config(path: Path | None) -> Dict[str, Any]:
    """Charge un YAML ; fichier absent → {} (tout par défaut), YAML invalide → ConfigError."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"fichier de configuration introuvable: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config.yaml invalide: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: un mapping YAML est attendu à la racine")
    return data


def _merge(base: Dict[str, Any], overlay: Dict[str, Any], where: str = "") -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        dotted = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"clé de configuration inconnue: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: section attendue, reçu {value!r}")
            out[key] = _merge(base[key], value, f"{dotted}.")
        else:
            out[key] = value
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """`train.lambda3=10` → (["train", "lambda3"], 10)."""
    if "=" not in item:
        raise ConfigError(f"surcharge invalide (clé=valeur attendu): {item}")
    key, raw = item.split("=", 1)
    path = [p.strip() for p in key.strip().split(".") if p.strip()]
    if not path:
        raise ConfigError(f"surcharge sans clé: {item}")
    try:
        value = yaml.safe_load(raw.strip()) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"valeur illisible pour {key}: {raw}") from exc
    return path, value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    out = copy.deepcopy(raw)
    for item in overrides:
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{item}: {part} n'est pas une section")
        node[path[-1]] = value
    return out


def resolve_config(raw: Dict[str, Any] | None = None,
                   overrides: Sequence[str] = ()) -> Dict[str, Any]:
    """Défauts ⊕ fichier ⊕ surcharges, puis validation complète."""
    merged = _merge(DEFAULTS, apply_overrides(raw or {}, overrides))
    build_configs(merged)
    return merged


def config_hash(cfg: Dict[str, Any]) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------
# Dataclasses
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class EvalConfig:
    organ_class: int = 1
    all_classes: bool = False
    slice_thickness_mm: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "SYNSEG"
    weights: LossWeights = LossWeights()
    lr_gen: float = 1e-4
    lr_disc: float = 2e-4
    epochs: int = 100
    batch: int = 1
    image_size: int = 64
    n_classes: int = 2
    generator: GeneratorConfig = GeneratorConfig()
    segmenter: GeneratorConfig = GeneratorConfig(out_channels=2)
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    init_std: float = 0.02
    seed: int = 0
    gan_form: str = "log"
    history_buffer: int = 50
    eval_every: int = 10
    selection: str = "source_proxy"
    fixed_epoch: int = 0
    class_weights: tuple[float, ...] | None = None
    steps_per_epoch: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variante inconnue: {self.variant} (attendu {VARIANTS})")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs doit être ≥ 1 (reçu {self.epochs})")
        if self.batch < 1:
            raise ConfigError(f"train.batch doit être ≥ 1 (reçu {self.batch})")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ConfigError("les taux d'apprentissage doivent être > 0")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError(f"model.image_size doit être un multiple de 4 (reçu {self.image_size})")
        if self.n_classes < 2:
            raise ConfigError(f"model.n_classes doit être ≥ 2 (reçu {self.n_classes})")
        if self.gan_form not in GAN_FORMS:
            raise ConfigError(f"train.gan_form inconnu: {self.gan_form}")
        if self.history_buffer < 0 or self.eval_every < 1 or self.steps_per_epoch < 0:
            raise ConfigError("history_buffer ≥ 0, eval_every ≥ 1, steps_per_epoch ≥ 0 requis")
        if self.selection not in SELECTION_POLICIES:
            raise ConfigError(f"train.selection inconnue: {self.selection}")
        if not 0 <= self.fixed_epoch <= self.epochs:
            raise ConfigError(f"train.fixed_epoch hors [0, {self.epochs}]: {self.fixed_epoch}")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise ConfigError(f"{len(self.class_weights)} poids de classe pour {self.n_classes} classes")


@dataclass(frozen=True)
class RunConfig:
    raw: Dict[str, Any]
    phantom: PhantomSpec
    train: TrainConfig
    eval: EvalConfig

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _typed(section: Dict[str, Any], where: str, key: str, kind: type) -> Any:
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{where}.{key}: {kind.__name__} attendu, reçu {value!r}")
    return value


def build_configs(cfg: Dict[str, Any]) -> RunConfig:
    """Configuration résolue → dataclasses validées."""
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed: entier ≥ 0 attendu, reçu {seed!r}")
    model, train, ev = cfg["model"], cfg["train"], cfg["eval"]
    m = {k: _typed(model, "model", k, type(DEFAULTS["model"][k])) for k in model}
    ph = {k: _typed(cfg["phantom"], "phantom", k, type(DEFAULTS["phantom"][k]))
          for k in cfg["phantom"]}
    phantom = PhantomSpec(seed=seed, n_classes=m["n_classes"], **ph)
    weights = LossWeights(*(float(_typed(train, "train", f"lambda{i}", float)) for i in range(1, 6)))
    class_weights = train["class_weights"]
    if class_weights is not None:
        if not isinstance(class_weights, list):
            raise ConfigError(f"train.class_weights: liste attendue, reçu {class_weights!r}")
        class_weights = tuple(float(w) for w in class_weights)
    tc = TrainConfig(
        variant=_typed(train, "train", "variant", str),
        weights=weights,
        lr_gen=_typed(train, "train", "lr_gen", float),
        lr_disc=_typed(train, "train", "lr_disc", float),
        epochs=_typed(train, "train", "epochs", int),
        batch=_typed(train, "train", "batch", int),
        image_size=m["image_size"],
        n_classes=m["n_classes"],
        generator=GeneratorConfig(1, 1, m["gen_base_filters"], m["n_res_blocks"]),
        segmenter=GeneratorConfig(1, m["n_classes"], m["gen_base_filters"], m["n_res_blocks"]),
        discriminator=DiscriminatorConfig(1, m["disc_base_filters"], m["disc_layers"]),
        init_std=m["init_std"],
        seed=seed,
        gan_form=_typed(train, "train", "gan_form", str),
        history_buffer=_typed(train, "train", "history_buffer", int),
        eval_every=_typed(train, "train", "eval_every", int),
        selection=_typed(train, "train", "selection", str),
        fixed_epoch=_typed(train, "train", "fixed_epoch", int),
        class_weights=class_weights,
        steps_per_epoch=_typed(train, "train", "steps_per_epoch", int),
    )
    ec = EvalConfig(
        organ_class=_typed(ev, "eval", "organ_class", int),
        all_classes=_typed(ev, "eval", "all_classes", bool),
        slice_thickness_mm=_typed(ev, "eval", "slice_thickness_mm", float),
    )
    if not 1 <= ec.organ_class < tc.n_classes:
        raise ConfigError(f"eval.organ_class hors [1, {tc.n_classes}): {ec.organ_class}")
    return RunConfig(cfg, phantom, tc, ec)


def load_run_config(path: Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    resolved = resolve_config(load_yaml_config(path), overrides)
    run = build_configs(resolved)
    logger.info("configuration chargée (variante %s, empreinte %s)", run.train.variant,
                run.hash[:12])
    return run
