# -*- coding: utf-8 -*-
"""
CrossSeg — Module losses
Objectif: Les cinq pertes d'entraînement (2 adversariales, 2 de cycle, segmentation) + somme pondérée.

Toutes les pertes réduisent par la moyenne (pixels / patches) pour que les poids λ restent
indépendants de la taille d'image.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from modules.errors import ConfigError, ShapeError
from modules.tensor import Tensor, add, l1_diff, log_sigmoid, mean, mul, neg, sub, sum_

logger = logging.getLogger(__name__)

GAN_FORMS = ("log", "least_squares")
DEFAULT_WEIGHTS = (1.0, 1.0, 10.0, 10.0, 1.0)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 10.0
    lambda4: float = 10.0
    lambda5: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} doit être ≥ 0 (reçu {getattr(self, f.name)})")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)


@dataclass
class LossParts:
    """Composantes d'une itération ; `None` = terme structurellement absent (variante)."""

    gan_g1: Tensor | None = None
    gan_g2: Tensor | None = None
    cycle_s: Tensor | None = None
    cycle_t: Tensor | None = None
    seg: Tensor | None = None

    def values(self) -> tuple[Tensor | None, ...]:
        return (self.gan_g1, self.gan_g2, self.cycle_s, self.cycle_t, self.seg)

    def as_floats(self) -> dict[str, float]:
        return {f.name: (0.0 if v is None else v.item())
                for f, v in zip(fields(self), self.values(), strict=True)}


def _check_form(form: str) -> None:
    if form not in GAN_FORMS:
        raise ConfigError(f"forme adversariale inconnue: {form}")


def gan_loss_discriminator(d_real: Tensor, d_fake: Tensor, form: str = "log") -> Tensor:
    """Perte minimisée par D : −E[log σ(D(réel))] − E[log(1 − σ(D(faux)))] ou variante LS."""
    _check_form(form)
    if form == "log":
        return add(neg(mean(log_sigmoid(d_real))), neg(mean(log_sigmoid(neg(d_fake)))))
    real = sub(d_real, 1.0)
    return add(mean(mul(real, real)), mean(mul(d_fake, d_fake)))


def gan_loss_generator(d_fake: Tensor, form: str = "log") -> Tensor:
    """Variante non saturante −E[log σ(D(G(x)))] (ou E[(D(G(x)) − 1)²])."""
    _check_form(form)
    if form == "log":
        return neg(mean(log_sigmoid(d_fake)))
    diff = sub(d_fake, 1.0)
    return mean(mul(diff, diff))


def cycle_loss(reconstructed: Tensor, original: Tensor) -> Tensor:
    return l1_diff(reconstructed, original)


def class_weight_map(labels: np.ndarray, n_classes: int, class_weights: Sequence[float],
                     dtype: np.dtype = np.dtype(np.float32)) -> np.ndarray:
    """Masque one-hot (N, C, H, W) multiplié par w(mᵢ) de la classe vraie."""
    labels = np.asarray(labels)
    weights = np.asarray(class_weights, dtype=dtype)
    if weights.shape != (n_classes,):
        raise ShapeError(f"{weights.shape[0]} poids de classe pour {n_classes} classes")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels hors de [0, {n_classes}) : [{labels.min()}, {labels.max()}]")
    onehot = (labels[:, None, :, :] == np.arange(n_classes)[None, :, None, None]).astype(dtype)
    return onehot * weights[None, :, None, None]


def seg_loss(log_probs: Tensor, labels: np.ndarray, class_weights: Sequence[float] | None = None
             ) -> Tensor:
    """Entropie croisée pondérée : −(1/NHW) Σᵢ w(mᵢ)·log p[mᵢ, i]."""
    if log_probs.ndim != 4:
        raise ShapeError(f"log-probabilités NCHW attendues, reçu {log_probs.shape}")
    n, c, h, w = log_probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} incompatibles avec {log_probs.shape}")
    weights = np.ones(c) if class_weights is None else class_weights
    mask = Tensor(class_weight_map(labels, c, weights, log_probs.dtype))
    return mul(sum_(mul(log_probs, mask)), -1.0 / (n * h * w))


def total_loss(parts: LossParts | Sequence[Tensor | float | None], w: LossWeights) -> Tensor:
    """λ₁·L_GAN(G₁,D₁) + λ₂·L_GAN(G₂,D₂) + λ₃·L_cyc(S) + λ₄·L_cyc(T) + λ₅·L_seg."""
    values = parts.values() if isinstance(parts, LossParts) else tuple(parts)
    if len(values) != 5:
        raise ShapeError(f"total_loss attend 5 composantes, reçu {len(values)}")
    total: Tensor | None = None
    for lam, part in zip(w.as_tuple(), values, strict=True):
        if part is None:
            continue
        part = part if isinstance(part, Tensor) else Tensor(np.float32(part))
        term = mul(part, lam)
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(np.float32(0.0))
