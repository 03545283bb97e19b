# -*- coding: utf-8 -*-
"""
CrossSeg — Module rng
Objectif: Sous-flux aléatoires nommés dérivés d'une graine unique (init, sampler, phantom, pool).
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Générateur indépendant et reproductible pour le composant `name`."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def get_state(rng: np.random.Generator) -> dict:
    """État sérialisable (JSON) du générateur."""
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
