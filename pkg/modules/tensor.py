# -*- coding: utf-8 -*-
"""
CrossSeg — Module tensor
Objectif: Tenseurs denses fp32 + bande (tape) de différentiation automatique en mode inverse.

Points clés:
- Une `Tape` active (contexte `with Tape():`) enregistre chaque opération ; hors contexte,
  les opérations calculent sans mémoriser (mode inférence).
- Les identifiants des parents précèdent toujours ceux des enfants : la rétropropagation
  parcourt simplement la bande à l'envers.
- Convolution = corrélation croisée (pas de retournement du noyau).
- Les dtypes d'entrée sont conservés : fp32 pour l'entraînement, fp64 pour les oracles
  de différences finies.
"""
from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from modules.errors import ShapeError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
DEFAULT_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int | None, ...]
    backward: BackwardFn | None = None
    leaf: "Tensor | None" = None

    @property
    def parents(self) -> tuple[int, ...]:
        return tuple(i for i in self.inputs if i is not None)


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "crossseg_tape", default=None
)


class Tape:
    """Liste ordonnée de nœuds {op, parents, activations sauvegardées}."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None
        # les paramètres survivent à la bande : ils ne doivent plus la retenir
        for node in self.nodes:
            if node.leaf is not None and node.leaf.tape is self:
                node.leaf.node, node.leaf.tape = None, None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[int | None], backward: BackwardFn | None) -> int:
        for pid in inputs:
            if pid is not None and pid >= len(self.nodes):
                raise ShapeError(f"parent {pid} absent de la bande")
        self.nodes.append(TapeNode(op=op, inputs=tuple(inputs), backward=backward))
        return len(self.nodes) - 1

    def track(self, tensor: "Tensor") -> int | None:
        """Identifiant du nœud de `tensor` sur cette bande ; les paramètres y entrent en feuille."""
        if tensor.tape is self and tensor.node is not None:
            return tensor.node
        if not tensor.requires_grad:
            return None
        nid = self.record("leaf", (), None)
        self.nodes[nid].leaf = tensor
        tensor.node, tensor.tape = nid, self
        return nid


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


class Tensor:
    """Tableau n-dimensionnel participant (ou non) à la bande de gradient."""

    __slots__ = ("data", "grad", "node", "tape", "requires_grad", "name")

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: np.dtype | type | None = None,
    ) -> None:
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.tape: Tape | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- accès -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- opérateurs ------------------------------------------------------
    def __add__(self, other: object) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: object) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: object) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: object) -> "Tensor":
        return add(neg(self), other)

    def __mul__(self, other: object) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: object) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Emballe `data` et enregistre l'op si une bande est active et qu'une entrée est suivie."""
    out = Tensor(data if data.flags.c_contiguous else np.ascontiguousarray(data))
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    ids = [tape.track(t) for t in inputs]
    if all(i is None for i in ids):
        return out
    out.node = tape.record(op, ids, backward)
    out.tape = tape
    return out


def _as_tensor(value: object, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """Vrai si `b` est un scalaire de rang 0 diffusé sur `a`."""
    if a.shape == b.shape:
        return False
    if b.ndim == 0:
        return True
    raise ShapeError(f"{op}: formes incompatibles {a.shape} / {b.shape}")


def _reduce_scalar(g: np.ndarray, scalar: bool) -> np.ndarray:
    return np.asarray(g.sum(), dtype=g.dtype) if scalar else g


# ---------------------------------------------------------------------
# Élémentaires
# ---------------------------------------------------------------------
def add(a: Tensor, b: object) -> Tensor:
    b = _as_tensor(b, a)
    scalar = _check_binary(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, _reduce_scalar(g, scalar)))


def sub(a: Tensor, b: object) -> Tensor:
    b = _as_tensor(b, a)
    scalar = _check_binary(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, _reduce_scalar(-g, scalar)))


def mul(a: Tensor, b: object) -> Tensor:
    b = _as_tensor(b, a)
    scalar = _check_binary(a, b, "mul")
    av, bv = a.data, b.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * bv, _reduce_scalar(g * av, scalar)

    return _result(av * bv, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def elementwise(op: str, a: Tensor, b: object = None) -> Tensor:
    """Point d'entrée unique {add|sub|mul|neg}."""
    if op == "neg":
        return neg(a)
    table = {"add": add, "sub": sub, "mul": mul}
    if op not in table:
        raise ShapeError(f"opération élémentaire inconnue: {op}")
    return table[op](a, b)


# ---------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data).astype(x.dtype)
    return _result(out, "leaky_relu", (x,), lambda g: (np.where(mask, g, slope * g),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log σ(x) stable : −softplus(−x)."""
    y = -np.logaddexp(0, -x.data).astype(x.dtype)
    return _result(y, "log_sigmoid", (x,), lambda g: (g * expit(-x.data),))


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def activation(op: str, x: Tensor) -> Tensor:
    if op not in _ACTIVATIONS:
        raise ShapeError(f"activation inconnue: {op}")
    return _ACTIVATIONS[op](x)


# ---------------------------------------------------------------------
# Réductions
# ---------------------------------------------------------------------
def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n, shape = x.size, x.shape
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def l1_diff(a: Tensor, b: Tensor) -> Tensor:
    """Moyenne de |a − b| sur tous les éléments."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_diff: formes différentes {a.shape} / {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = (g / n) * sign
        return ga, -ga

    return _result(np.asarray(np.abs(diff).mean(), dtype=a.dtype), "l1_diff", (a, b), backward)


def reductions(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op == "mean":
        return mean(a)
    if op == "sum":
        return sum_(a)
    if op == "l1_diff":
        if b is None:
            raise ShapeError("l1_diff attend deux tenseurs")
        return l1_diff(a, b)
    raise ShapeError(f"réduction inconnue: {op}")


# ---------------------------------------------------------------------
# log_softmax
# ---------------------------------------------------------------------
def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"log_softmax attend un tenseur NCHW, reçu rang {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, "log_softmax", (x,), backward)


# ---------------------------------------------------------------------
# Padding / convolutions
# ---------------------------------------------------------------------
def _reflect_index(n: int, p: int) -> np.ndarray:
    idx = np.abs(np.arange(-p, n + p))
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def pad2d(x: Tensor, size: int, mode: str = "zero") -> Tensor:
    """Remplissage spatial (zéro ou miroir) d'un tenseur NCHW."""
    if size == 0:
        return x
    _, _, h, w = x.shape
    if mode == "zero":
        out = np.pad(x.data, ((0, 0), (0, 0), (size, size), (size, size)))
        return _result(out, "pad_zero", (x,), lambda g: (g[:, :, size:size + h, size:size + w],))
    if mode != "reflect":
        raise ShapeError(f"mode de padding inconnu: {mode}")
    if size >= h or size >= w:
        raise ShapeError(f"padding miroir {size} trop grand pour {h}x{w}")
    rows, cols = _reflect_index(h, size), _reflect_index(w, size)
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        tmp = np.zeros(g.shape[:2] + (h, g.shape[3]), dtype=g.dtype)
        np.add.at(tmp, (slice(None), slice(None), rows), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), tmp)
        return (gx,)

    return _result(out, "pad_reflect", (x,), backward)


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Vue (N, C, Ho, Wo, K, K) des fenêtres glissantes."""
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, stride: int, h: int, w: int) -> np.ndarray:
    """Adjoint de `_windows` : cols (N, Ho, Wo, C, K, K) → (N, C, h, w), ordre de somme fixe."""
    n, ho, wo, c, k, _ = cols.shape
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    cols_t = cols.transpose(0, 3, 4, 5, 1, 2)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                cols_t[:, :, ki, kj]
            )
    return out


def _check_kernel(weight: Tensor, bias: Tensor | None, out_channels: int) -> int:
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"noyau carré OIKK attendu, reçu {weight.shape}")
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"biais {bias.shape} incompatible avec {out_channels} canaux")
    return weight.shape[2]


def _conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    _, _, h, w = x.shape
    k = weight.shape[2]
    win = _windows(x.data, k, stride)
    wv = weight.data
    out = np.tensordot(win, wv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, wv, axes=([1], [0]))
        gx = _scatter_windows(cols, stride, h, w)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", inputs, backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: str = "zero",
    pad_size: int = 0,
) -> Tensor:
    """Corrélation croisée 2-D NCHW ; taille de sortie floor((H + 2p − K)/s) + 1."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d attend NCHW, reçu {x.shape}")
    k = _check_kernel(weight, bias, weight.shape[0])
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: {x.shape[1]} canaux d'entrée pour un noyau {weight.shape}")
    if stride < 1:
        raise ShapeError(f"stride invalide: {stride}")
    h, w = x.shape[2] + 2 * pad_size, x.shape[3] + 2 * pad_size
    if h < k or w < k:
        raise ShapeError(f"noyau {k} plus grand que l'entrée remplie {h}x{w}")
    return _conv2d_valid(pad2d(x, pad_size, pad), weight, bias, stride)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad_size: int = 0,
    output_pad: int = 0,
) -> Tensor:
    """Adjoint de conv2d (poids I×O×K×K) ; sortie (H − 1)·s − 2p + K + output_pad."""
    if x.ndim != 4:
        raise ShapeError(f"conv_transpose2d attend NCHW, reçu {x.shape}")
    k = _check_kernel(weight, bias, weight.shape[1])
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: {x.shape[1]} canaux pour un noyau {weight.shape}")
    if stride < 1 or output_pad < 0 or output_pad >= stride:
        raise ShapeError(f"stride={stride} / output_pad={output_pad} invalides")
    n, _, h, w = x.shape
    h_out = (h - 1) * stride - 2 * pad_size + k + output_pad
    w_out = (w - 1) * stride - 2 * pad_size + k + output_pad
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"taille de sortie négative {h_out}x{w_out}")
    h_full, w_full = h_out + 2 * pad_size, w_out + 2 * pad_size
    xv, wv = x.data, weight.data
    cols = np.tensordot(xv, wv, axes=([1], [0]))
    full = _scatter_windows(cols, stride, h_full, w_full)
    out = full[:, :, pad_size:pad_size + h_out, pad_size:pad_size + w_out]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        g_full = np.zeros((n, g.shape[1], h_full, w_full), dtype=g.dtype)
        g_full[:, :, pad_size:pad_size + h_out, pad_size:pad_size + w_out] = g
        win = _windows(g_full, k, stride)[:, :, :h, :w]
        gx = np.tensordot(win, wv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xv, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv_transpose2d", inputs, backward)


# ---------------------------------------------------------------------
# Normalisation d'instance
# ---------------------------------------------------------------------
def instance_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Moyenne 0 / variance 1 par échantillon et par canal, puis affine gamma/beta."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm2d attend NCHW, reçu {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta {gamma.shape}/{beta.shape} pour {c} canaux")
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    gv = gamma.data[None, :, None, None]
    out = gv * xhat + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gv
        gx = (inv / m) * (
            m * dxhat
            - dxhat.sum(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        )
        return gx, dgamma, dbeta

    return _result(out, "instance_norm2d", (x, gamma, beta), backward)


# ---------------------------------------------------------------------
# Rétropropagation
# ---------------------------------------------------------------------
def backward(root: Tensor) -> None:
    """Accumule dRoot/dParam dans `.grad` de chaque feuille suivie (accumulation sans remise à zéro)."""
    if root.size != 1:
        raise ShapeError(f"backward attend un scalaire, reçu {root.shape}")
    if root.node is None or root.tape is None:
        raise ShapeError("la racine n'est pas enregistrée sur une bande")
    nodes = root.tape.nodes
    grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    for nid in range(root.node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.leaf is not None:
            leaf = node.leaf
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            continue
        for pid, pg in zip(node.inputs, node.backward(g), strict=True):
            if pid is None or pg is None:
                continue
            grads[pid] = pg if pid not in grads else grads[pid] + pg
    logger.debug("backward: %d nœuds parcourus", root.node + 1)
