# -*- coding: utf-8 -*-
"""
CrossSeg — Module networks
Objectif: Constructeurs + passe avant des trois rôles : générateur, discriminateur, segmenteur.

Points clés:
- Générateur ResNet : stem 7×7 (miroir) → 2 convs stride 2 → n blocs résiduels → 2 convs
  transposées → conv 7×7 → tanh.
- Discriminateur PatchGAN : convs 4×4, leaky_relu(0.2), norme d'instance (sauf 1re couche),
  sortie = grille de scores bruts (la sigmoïde vit dans la perte).
- Segmenteur : même topologie que le générateur, tête à C canaux + log_softmax.
- Une `Network` est une liste ordonnée de `LayerSpec` interprétée par `forward` ;
  les noms de paramètres sont stables (`down1.conv.weight`, `res2.norm1.gamma`, ...).
"""
from __future__ import annotations

import contextlib
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from modules.errors import ConfigError, ShapeError
from modules.tensor import (
    Tensor,
    activation,
    conv2d,
    conv_transpose2d,
    instance_norm2d,
    log_softmax,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02
ROLES = ("generator", "discriminator", "segmenter")


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_filters: int = 16
    n_res_blocks: int = 3

    def __post_init__(self) -> None:
        if self.n_res_blocks < 1:
            raise ConfigError(f"n_res_blocks doit être ≥ 1 (reçu {self.n_res_blocks})")
        if self.base_filters < 4:
            raise ConfigError(f"base_filters doit être ≥ 4 (reçu {self.base_filters})")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("le nombre de canaux doit être ≥ 1")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    base_filters: int = 16
    n_layers: int = 3

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ConfigError(f"n_layers doit être ≥ 1 (reçu {self.n_layers})")
        if self.base_filters < 1:
            raise ConfigError(f"base_filters doit être ≥ 1 (reçu {self.base_filters})")


@dataclass(frozen=True)
class LayerSpec:
    """Une couche : conv | deconv | norm | act | residual | log_softmax."""

    kind: str
    name: str = ""
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    pad: str = "zero"
    pad_size: int = 0
    output_pad: int = 0
    fn: str = ""
    body: tuple["LayerSpec", ...] = ()


@dataclass
class Network:
    role: str
    layers: list[LayerSpec]
    params: dict[str, Tensor] = field(default_factory=dict)
    in_channels: int = 1
    out_channels: int = 1
    size_multiple: int = 1

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"rôle inconnu: {self.role}")

    # -- passe avant -----------------------------------------------------
    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"{self.role}: entrée NCHW attendue, reçu {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.role}: {x.shape[1]} canaux reçus, {self.in_channels} attendus")
        h, w = x.shape[2:]
        if h % self.size_multiple or w % self.size_multiple:
            raise ShapeError(f"{self.role}: {h}x{w} non divisible par {self.size_multiple}")
        out = x
        for layer in self.layers:
            out = self._apply(layer, out)
        if self.role != "discriminator" and out.shape[2:] != (h, w):
            raise ShapeError(f"{self.role}: sortie {out.shape} pour une entrée {x.shape}")
        return out

    def _apply(self, layer: LayerSpec, x: Tensor) -> Tensor:
        p = self.params
        if layer.kind == "conv":
            return conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"],
                          stride=layer.stride, pad=layer.pad, pad_size=layer.pad_size)
        if layer.kind == "deconv":
            return conv_transpose2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"],
                                    stride=layer.stride, pad_size=layer.pad_size,
                                    output_pad=layer.output_pad)
        if layer.kind == "norm":
            return instance_norm2d(x, p[f"{layer.name}.gamma"], p[f"{layer.name}.beta"])
        if layer.kind == "act":
            return activation(layer.fn, x)
        if layer.kind == "log_softmax":
            return log_softmax(x, axis=1)
        if layer.kind == "residual":
            y = x
            for sub in layer.body:
                y = self._apply(sub, y)
            return x + y
        raise ShapeError(f"type de couche inconnu: {layer.kind}")

    # -- paramètres ------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def requires_grad_(self, flag: bool) -> "Network":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Network"]:
        """Coupe le gradient vers les paramètres le temps du bloc."""
        previous = {name: t.requires_grad for name, t in self.params.items()}
        self.requires_grad_(False)
        try:
            yield self
        finally:
            for name, flag in previous.items():
                self.params[name].requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) ^ set(state))
            raise ShapeError(f"{self.role}: noms de paramètres incohérents {missing[:4]}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: forme {arr.shape} au lieu de {t.shape}")
            t.data = arr.copy()
            t.grad = None

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.params.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(t.data).tobytes())
        return digest.hexdigest()


# ---------------------------------------------------------------------
# Briques
# ---------------------------------------------------------------------
def _conv(name: str, cin: int, cout: int, k: int, stride: int = 1,
          pad: str = "zero", pad_size: int = 0) -> LayerSpec:
    return LayerSpec("conv", name, cin, cout, k, stride, pad, pad_size)


def _norm(name: str, channels: int) -> LayerSpec:
    return LayerSpec("norm", name, channels, channels)


def _act(fn: str) -> LayerSpec:
    return LayerSpec("act", fn=fn)


def _residual(name: str, channels: int) -> LayerSpec:
    body = (
        _conv(f"{name}.conv1", channels, channels, 3, 1, "reflect", 1),
        _norm(f"{name}.norm1", channels),
        _act("relu"),
        _conv(f"{name}.conv2", channels, channels, 3, 1, "reflect", 1),
        _norm(f"{name}.norm2", channels),
    )
    return LayerSpec("residual", name, channels, channels, body=body)


def _backbone(cfg: GeneratorConfig) -> list[LayerSpec]:
    nf = cfg.base_filters
    layers = [
        _conv("stem.conv", cfg.in_channels, nf, 7, 1, "reflect", 3),
        _norm("stem.norm", nf),
        _act("relu"),
    ]
    for i, (cin, cout) in enumerate(((nf, 2 * nf), (2 * nf, 4 * nf)), start=1):
        layers += [_conv(f"down{i}.conv", cin, cout, 3, 2, "zero", 1),
                   _norm(f"down{i}.norm", cout), _act("relu")]
    layers += [_residual(f"res{i}", 4 * nf) for i in range(1, cfg.n_res_blocks + 1)]
    for i, (cin, cout) in enumerate(((4 * nf, 2 * nf), (2 * nf, nf)), start=1):
        layers += [LayerSpec("deconv", f"up{i}.conv", cin, cout, 3, 2, "zero", 1, output_pad=1),
                   _norm(f"up{i}.norm", cout), _act("relu")]
    return layers


def _flatten(layers: list[LayerSpec]) -> Iterator[LayerSpec]:
    for layer in layers:
        if layer.kind == "residual":
            yield from _flatten(list(layer.body))
        else:
            yield layer


def init_params(layers: list[LayerSpec], rng: np.random.Generator,
                init_std: float = INIT_STD) -> dict[str, Tensor]:
    """Poids ~ N(0, init_std), biais 0, gamma 1, beta 0 (ordre des couches)."""
    params: dict[str, Tensor] = {}

    def put(name: str, arr: np.ndarray) -> None:
        if name in params:
            raise ConfigError(f"paramètre dupliqué: {name}")
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)

    for layer in _flatten(layers):
        if layer.kind in ("conv", "deconv"):
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            if layer.kind == "deconv":
                shape = (layer.in_ch, layer.out_ch, layer.kernel, layer.kernel)
            put(f"{layer.name}.weight", rng.normal(0.0, init_std, size=shape)
                if init_std > 0 else np.zeros(shape))
            put(f"{layer.name}.bias", np.zeros(layer.out_ch))
        elif layer.kind == "norm":
            put(f"{layer.name}.gamma", np.ones(layer.out_ch))
            put(f"{layer.name}.beta", np.zeros(layer.out_ch))
    return params


# ---------------------------------------------------------------------
# Constructeurs
# ---------------------------------------------------------------------
def build_generator(cfg: GeneratorConfig, rng: np.random.Generator,
                    init_std: float = INIT_STD) -> Network:
    layers = _backbone(cfg) + [
        _conv("head.conv", cfg.base_filters, cfg.out_channels, 7, 1, "reflect", 3),
        _act("tanh"),
    ]
    net = Network("generator", layers, init_params(layers, rng, init_std),
                  cfg.in_channels, cfg.out_channels, size_multiple=4)
    logger.debug("générateur construit: %d paramètres", net.num_parameters())
    return net


def build_segmenter(cfg: GeneratorConfig, rng: np.random.Generator,
                    init_std: float = INIT_STD) -> Network:
    if cfg.out_channels < 2:
        raise ConfigError(f"le segmenteur exige C ≥ 2 classes (reçu {cfg.out_channels})")
    layers = _backbone(cfg) + [
        _conv("head.conv", cfg.base_filters, cfg.out_channels, 7, 1, "reflect", 3),
        LayerSpec("log_softmax"),
    ]
    net = Network("segmenter", layers, init_params(layers, rng, init_std),
                  cfg.in_channels, cfg.out_channels, size_multiple=4)
    logger.debug("segmenteur construit: %d paramètres", net.num_parameters())
    return net


def build_discriminator(base_filters: int, n_layers: int, rng: np.random.Generator,
                        in_channels: int = 1, init_std: float = INIT_STD) -> Network:
    cfg = DiscriminatorConfig(in_channels, base_filters, n_layers)
    nf = cfg.base_filters
    layers = [_conv("layer0.conv", in_channels, nf, 4, 2, "zero", 1), _act("leaky_relu")]
    mult = 1
    for n in range(1, n_layers):
        prev, mult = mult, min(2**n, 8)
        layers += [_conv(f"layer{n}.conv", nf * prev, nf * mult, 4, 2, "zero", 1),
                   _norm(f"layer{n}.norm", nf * mult), _act("leaky_relu")]
    prev, mult = mult, min(2**n_layers, 8)
    layers += [
        _conv(f"layer{n_layers}.conv", nf * prev, nf * mult, 4, 1, "zero", 1),
        _norm(f"layer{n_layers}.norm", nf * mult),
        _act("leaky_relu"),
        _conv("head.conv", nf * mult, 1, 4, 1, "zero", 1),
    ]
    return Network("discriminator", layers, init_params(layers, rng, init_std), in_channels, 1)


def forward(net: Network, x: Tensor) -> Tensor:
    return net.forward(x)
