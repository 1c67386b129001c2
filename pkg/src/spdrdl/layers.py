"""Differentiable building blocks for the enhancement / backbone / head networks.

Strided pooling comes in two flavours: plain ``max_pool`` (max over a 2x2
window every 2 pixels) and ``aa_maxpool``, which splits the same operation
into a dense max filter, a fixed binomial blur and a stride-2 subsample so
that high frequencies are removed before decimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, apply_op

BLUR_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
MINMAX_EPS = 1e-7

LAYER_KINDS = (
    "input",
    "conv",
    "dense",
    "aa-maxpool",
    "maxpool",
    "upsample",
    "concat",
    "global-avg-pool",
    "softmax",
    "coordconv",
    "minmax-norm",
    "flatten",
)


@dataclass
class LayerSpec:
    """One node of a network description.

    ``inputs`` name earlier layers; ``filters``/``kernel``/``stride``/``pool``
    are only meaningful for the kinds that use them. ``aa`` marks strided
    layers that low-pass filter before subsampling.
    """

    name: str
    kind: str
    inputs: Tuple[str, ...] = ()
    filters: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    pool: Optional[int] = None
    relu: bool = False
    aa: bool = False
    group: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.inputs = tuple(self.inputs)

    @property
    def strided(self) -> bool:
        return self.stride > 1 or self.kind in ("aa-maxpool", "maxpool")


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Zero-mean Gaussian with variance 2 / fan_in."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, relu: bool = True) -> Tensor:
    out = T.conv2d(x, weight, bias, stride=1, padding="same")
    return out.relu() if relu else out


def aa_blur(x: Tensor) -> Tensor:
    """Depthwise 3x3 binomial blur, stride 1, symmetric border padding.

    Symmetric (half-sample) reflection makes every input pixel contribute
    total weight 1, so constants and the image mean are preserved exactly.
    """
    padded = T.pad(x, [(0, 0), (0, 0), (1, 1), (1, 1)], mode="symmetric")
    return T.depthwise_conv2d(padded, BLUR_KERNEL)


def _pad_to_even(x: Tensor) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    if h % 2 == 0 and w % 2 == 0:
        return x
    return T.pad(x, [(0, 0), (0, 0), (0, h % 2), (0, w % 2)], mode="edge")


def max_pool(x: Tensor, pool: int = 2) -> Tensor:
    """Plain strided max pooling; output extent is ceil(H/pool)."""
    return T.pool_max(_pad_to_even(x), pool, pool)


def aa_maxpool(x: Tensor, pool: int = 2) -> Tensor:
    """Max filter (stride 1) -> binomial blur -> subsample by ``pool``."""
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"aa_maxpool needs H, W >= 2, got {x.shape}")
    dense = T.pool_max(T.pad(x, [(0, 0), (0, 0), (0, pool - 1), (0, pool - 1)], mode="edge"), pool, 1)
    return aa_blur(dense)[:, :, ::pool, ::pool]


def coord_maps(h: int, w: int, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-centred coordinate maps in [-0.5, 0.5].

    ``v[k, l]`` varies along columns, ``hmap[k, l]`` along rows; a unit
    extent yields an all-zero map.
    """
    cols = np.arange(w) / (w - 1) - 0.5 if w > 1 else np.zeros(w)
    rows = np.arange(h) / (h - 1) - 0.5 if h > 1 else np.zeros(h)
    v = np.broadcast_to(cols[None, :], (h, w)).astype(dtype)
    hmap = np.broadcast_to(rows[:, None], (h, w)).astype(dtype)
    return v, hmap


def coordconv_augment(x: Tensor) -> Tensor:
    n, _, h, w = x.shape
    v, hmap = coord_maps(h, w, x.dtype)
    coords = np.broadcast_to(np.stack([v, hmap])[None], (n, 2, h, w))
    return T.concat([x, Tensor(np.ascontiguousarray(coords))], axis=1)


def minmax_normalize(x: Tensor, eps: float = MINMAX_EPS) -> Tensor:
    """Rescale each image of an ``[N,C,H,W]`` batch (or a whole lower-rank
    tensor) to roughly [0, 1]."""
    axes = (1, 2, 3) if x.ndim == 4 else None
    lo = x.min(axis=axes, keepdims=True)
    hi = x.max(axis=axes, keepdims=True)
    if axes is None:
        lo = lo.reshape(())
        hi = hi.reshape(())
        return (x - lo) / (hi - lo + eps)
    return (x - T.broadcast_to(lo, x.shape)) / T.broadcast_to(hi - lo + eps, x.shape)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    return T.upsample_nearest(x, factor)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Channel-axis concatenation."""
    return T.concat(tensors, axis=1)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + T.broadcast_to(bias.reshape(1, -1), out.shape)
    return out


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return apply_op(s, (x,), fn, "softmax")
