# -*- coding: utf-8 -*-
"""
CrossSeg — Module optim
Objectif: Adam avec correction de biais, un état par réseau (lr propre à G/Seg et à D).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from modules.errors import ConfigError, ShapeError
from modules.networks import Network

logger = logging.getLogger(__name__)

BETA1 = 0.5
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    lr: float
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(net: Network, lr: float, beta1: float = BETA1, beta2: float = BETA2,
              eps: float = EPS) -> AdamState:
    if lr <= 0:
        raise ConfigError(f"taux d'apprentissage non positif: {lr}")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, param in net.named_parameters():
        state.m[name] = np.zeros_like(param.data)
        state.v[name] = np.zeros_like(param.data)
    return state


def adam_step(state: AdamState, net: Network) -> None:
    """Mise à jour Adam ; les gradients restent en place (l'appelant les remet à zéro)."""
    missing = [name for name, p in net.named_parameters() if p.grad is None]
    if missing:
        raise ShapeError(f"gradient absent pour {len(missing)} paramètre(s), ex. {missing[0]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, param in net.named_parameters():
        g = param.grad
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(param.dtype), v.astype(param.dtype)
        m_hat = m / bias1
        v_hat = v / bias2
        param.data = (param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            param.dtype
        )
