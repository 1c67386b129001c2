"""Loss terms: focal classification loss, the MS-SSIM image prior and the
target-shift regression prior, plus their weighted combination."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import MissingShiftError, ShapeError
from .tensor import Tensor

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
FACTOR_FLOOR = 1e-6
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2

    def kernel_1d(self) -> np.ndarray:
        r = np.arange(self.window) - (self.window - 1) / 2
        g = np.exp(-(r ** 2) / (2 * self.sigma ** 2))
        return g / g.sum()

    def kernel_2d(self) -> np.ndarray:
        g = self.kernel_1d()
        return np.outer(g, g)


@dataclass(frozen=True)
class MsSsimConfig:
    ssim: SsimConfig = field(default_factory=SsimConfig)
    weights: Tuple[float, ...] = MSSSIM_WEIGHTS

    @property
    def max_scales(self) -> int:
        return len(self.weights)

    def scales_for(self, h: int, w: int) -> int:
        """Number of scales usable for an ``h`` x ``w`` image."""
        m = min(h, w)
        if m < self.ssim.window:
            raise ShapeError(f"image {h}x{w} is smaller than the {self.ssim.window}px SSIM window")
        return min(self.max_scales, int(math.floor(math.log2(m / self.ssim.window))) + 1)

    def weights_for(self, scales: int) -> np.ndarray:
        w = np.asarray(self.weights[:scales], dtype=np.float64)
        return w / w.sum()


@dataclass
class LossBreakdown:
    """Batch-mean loss components and the weighted total.

    ``w`` is the batch mean of the per-sample class weight (0 background,
    1 target) and ``sscp`` the mean over target samples, so
    ``total == focal + lambda1 * ssp + w * lambda2 * sscp``.
    """

    focal: float
    ssp: float
    sscp: float
    total: float
    lambda1: float
    lambda2: float
    w: float
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def recompose(self) -> float:
        return self.focal + self.lambda1 * self.ssp + self.w * self.lambda2 * self.sscp


def _as_image_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 2:
        t = t.reshape(1, 1, *t.shape)
    elif t.ndim == 3:
        t = t.reshape(t.shape[0], 1, *t.shape[1:])
    if t.ndim != 4:
        raise ShapeError(f"expected an image or image batch, got shape {t.shape}")
    return t


def _band_matrix(n: int, taps: np.ndarray, dtype) -> np.ndarray:
    k = len(taps)
    m = np.zeros((n - k + 1, n), dtype=dtype)
    for i in range(n - k + 1):
        m[i, i:i + k] = taps
    return m


def gaussian_filter_valid(x: Tensor, cfg: SsimConfig) -> Tensor:
    """Separable Gaussian filtering of ``x[N,C,H,W]`` without padding.

    Expressed as two banded matrix products so the tape handles gradients.
    """
    _, _, h, w = x.shape
    taps = cfg.kernel_1d()
    gw = Tensor(_band_matrix(w, taps, x.dtype).T)
    gh = Tensor(_band_matrix(h, taps, x.dtype).T)
    y = x @ gw                                    # N,C,H,Wo
    y = y.transpose(0, 1, 3, 2) @ gh              # N,C,Wo,Ho
    return y.transpose(0, 1, 3, 2)


def ssim_maps(x: Tensor, y: Tensor, cfg: SsimConfig) -> Tuple[Tensor, Tensor]:
    """Luminance map and contrast*structure map of two image batches."""
    mu_x = gaussian_filter_valid(x, cfg)
    mu_y = gaussian_filter_valid(y, cfg)
    xx = gaussian_filter_valid(x * x, cfg)
    yy = gaussian_filter_valid(y * y, cfg)
    xy = gaussian_filter_valid(x * y, cfg)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x, var_y, cov = xx - mu_xx, yy - mu_yy, xy - mu_xy
    lum = (2 * mu_xy + cfg.c1) / (mu_xx + mu_yy + cfg.c1)
    # with C3 = C2/2 the contrast and structure factors collapse into one ratio
    cs = (2 * cov + cfg.c2) / (var_x + var_y + cfg.c2)
    return lum, cs


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")


def ssim(x, y, cfg: SsimConfig = SsimConfig(), per_sample: bool = False) -> Tensor:
    """Mean SSIM between two images (or batches), differentiable in both."""
    x, y = _as_image_batch(x), _as_image_batch(y)
    _check_pair(x, y)
    lum, cs = ssim_maps(x, y, cfg)
    smap = lum * cs
    return smap.mean(axis=(1, 2, 3)) if per_sample else smap.mean()


def _avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        x = x[:, :, : h - h % 2, : w - w % 2]
        h, w = h - h % 2, w - w % 2
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def ms_ssim(x, y, cfg: MsSsimConfig = MsSsimConfig(), per_sample: bool = False,
            scales: Optional[int] = None) -> Tensor:
    """Multi-scale SSIM.

    Contrast*structure means enter at every scale but the coarsest, where
    the full SSIM mean (luminance included) is used. Each factor is floored
    at 1e-6 and raised to its scale weight. The scale count shrinks for
    small images and the remaining weights are renormalised.
    """
    x, y = _as_image_batch(x), _as_image_batch(y)
    _check_pair(x, y)
    m = scales if scales is not None else cfg.scales_for(x.shape[2], x.shape[3])
    weights = cfg.weights_for(m)
    result = None
    for j in range(m):
        lum, cs = ssim_maps(x, y, cfg.ssim)
        if j < m - 1:
            factor = cs.mean(axis=(1, 2, 3))
            x, y = _avg_pool2(x), _avg_pool2(y)
        else:
            factor = (lum * cs).mean(axis=(1, 2, 3))
        term = factor.clip(lo=FACTOR_FLOOR) ** float(weights[j])
        result = term if result is None else result * term
    return result if per_sample else result.mean()


def loss_ssp(x, x_enhanced, cfg: MsSsimConfig = MsSsimConfig(), per_sample: bool = False) -> Tensor:
    """Structural-similarity prior: ``1 - MS-SSIM(x, x_enhanced)``."""
    return 1 - ms_ssim(x, x_enhanced, cfg, per_sample=per_sample)


def loss_sscp(p_shift, p_hat) -> Tensor:
    """Half squared distance between true and predicted shifts.

    Accepts single 2-vectors or ``[N, 2]`` batches (mean over rows).
    """
    p = p_shift if isinstance(p_shift, Tensor) else Tensor(np.asarray(p_shift, dtype=np.float64))
    q = p_hat if isinstance(p_hat, Tensor) else Tensor(np.asarray(p_hat, dtype=p.dtype))
    if p.shape != q.shape:
        raise ShapeError(f"shift shapes differ: {p.shape} vs {q.shape}")
    d = p - q
    if d.ndim == 1:
        return 0.5 * (d * d).sum()
    return 0.5 * (d * d).sum(axis=1).mean()


def focal_loss(y, y_hat, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Categorical focal loss averaged over the batch.

    ``y`` is one-hot (constant); ``y_hat`` holds class probabilities and is
    clamped to [1e-7, 1 - 1e-7] before the logarithm.
    """
    q = y_hat if isinstance(y_hat, Tensor) else Tensor(np.asarray(y_hat, dtype=np.float64))
    onehot = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=q.dtype)
    if onehot.shape != q.shape:
        raise ShapeError(f"label shape {onehot.shape} != prediction shape {q.shape}")
    if q.ndim == 1:
        q = q.reshape(1, -1)
        onehot = onehot.reshape(1, -1)
    p = q.clip(PROB_CLAMP, 1 - PROB_CLAMP)
    per_class = (-alpha) * ((1 - p) ** gamma) * Tensor(onehot) * p.log()
    return per_class.sum(axis=1).mean()


def cross_entropy(y, y_hat) -> Tensor:
    return focal_loss(y, y_hat, alpha=1.0, gamma=0.0)


def one_hot(labels: Sequence[int], num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def joint_loss(images, outputs: dict, labels, p_shift, lambda1: float, lambda2: float,
               alpha: float = 0.25, gamma: float = 2.0,
               ms_cfg: MsSsimConfig = MsSsimConfig()) -> LossBreakdown:
    """Focal + lambda1 * SSP + lambda2 * mean(w * SSCP) for one batch.

    Args:
        images: network input ``[N,1,H,W]`` (the SSP reference image).
        outputs: dict from the model forward with ``x_enhanced``,
            ``probabilities`` and ``p_hat``.
        labels: integer class per sample, 0 = background.
        p_shift: ``[N, 2]`` true shifts; rows of background samples are
            ignored and may be NaN. A target row containing NaN raises.
    """
    labels = np.asarray(labels, dtype=np.intp)
    probs = outputs["probabilities"]
    n = labels.size
    x = _as_image_batch(images)
    dtype = probs.dtype

    focal = focal_loss(one_hot(labels, probs.shape[1], dtype), probs, alpha, gamma)
    ssp = loss_ssp(Tensor(x.data.astype(dtype)), outputs["x_enhanced"], ms_cfg)

    targets = np.flatnonzero(labels != 0)
    w = targets.size / n
    if targets.size:
        if p_shift is None:
            raise MissingShiftError("target-class samples present but no shifts given")
        ps = np.asarray(p_shift, dtype=dtype)
        if ps.shape != (n, 2):
            raise ShapeError(f"p_shift must be [{n}, 2], got {ps.shape}")
        if np.isnan(ps[targets]).any():
            bad = int(targets[np.isnan(ps[targets]).any(axis=1)][0])
            raise MissingShiftError(f"sample {bad} has label {labels[bad]} but no shift")
        sscp = loss_sscp(Tensor(ps[targets]), outputs["p_hat"][targets])
    else:
        sscp = Tensor(np.zeros((), dtype=dtype))

    total = focal + lambda1 * ssp + (w * lambda2) * sscp
    return LossBreakdown(
        focal=focal.item(), ssp=ssp.item(), sscp=sscp.item(), total=total.item(),
        lambda1=lambda1, lambda2=lambda2, w=w, total_tensor=total,
    )
