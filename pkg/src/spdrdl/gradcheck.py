"""Finite-difference audit of every differentiable operation and of the full
joint loss, in float64.

Inputs are drawn so that no coordinate sits within a perturbation of a
kink (relu at 0, ties in max/min/abs, clip bounds).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import layers as L
from . import losses as LS
from . import model as M
from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-3
# primitives see kink-free inputs, so a wide step avoids rounding noise on
# tiny gradients; the full network is full of relu/max kinks and needs a
# narrow one
EPS = 1e-4
MODEL_EPS = 1e-5
# gradients smaller than this count as zero: central differences of an
# O(1) loss carry ~1e-12 of rounding noise, and float32 training cannot
# act on them anyway
FLOOR = 1e-8
INVARIANT_NOISE = 1e-10


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Values whose pairwise gaps are at least 1e-3 (no near-ties for max/min)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + rng.uniform(0.2, 0.8, size=n)) / n
    return (vals * 4 - 2).reshape(shape)


def _scalarize(rng: np.random.Generator, shape) -> Tensor:
    """Fixed random weights so sum(w * f(x)) exercises every output."""
    return Tensor(rng.standard_normal(shape))


def op_checks(rng: np.random.Generator) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """(name, scalar function of one tensor, input) for every primitive."""
    checks = []

    def add(name, fn, x, out_shape=None):
        probe = fn(Tensor(x))
        w = _scalarize(rng, probe.shape)
        checks.append((name, lambda t, fn=fn, w=w: (fn(t) * w).sum(), x))

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    add("add", lambda t: t + Tensor(b), a)
    add("sub", lambda t: Tensor(b) - t, a)
    add("mul", lambda t: t * Tensor(b), a)
    add("div-numerator", lambda t: t / Tensor(pos), a)
    add("div-denominator", lambda t: Tensor(b) / t, pos)
    add("pow", lambda t: t ** 3.0, pos)
    add("pow-scalar-exponent", lambda t: t ** 0.5, pos)
    add("neg", lambda t: -t, a)
    add("scalar-broadcast", lambda t: t * Tensor(np.array(1.7)) + 0.3, a)
    add("exp", lambda t: t.exp(), a)
    add("log", lambda t: t.log(), pos)
    add("abs", lambda t: t.abs(), away_from_zero(rng, (3, 4)))
    add("sqrt", lambda t: t.sqrt(), pos)
    add("relu", lambda t: t.relu(), away_from_zero(rng, (3, 4)))
    add("clip", lambda t: t.clip(-0.5, 0.5), distinct(rng, (3, 4)) * 0.37)
    other = distinct(rng, (3, 4))
    add("maximum", lambda t: t.maximum(Tensor(other)), distinct(rng, (3, 4)) + 0.013)
    add("minimum", lambda t: t.minimum(Tensor(other)), distinct(rng, (3, 4)) + 0.013)
    x3 = rng.standard_normal((2, 3, 4))
    add("sum", lambda t: t.sum(axis=1), x3)
    add("sum-keepdims", lambda t: t.sum(axis=(0, 2), keepdims=True), x3)
    add("mean", lambda t: t.mean(axis=(1, 2)), x3)
    add("max", lambda t: t.max(axis=2), distinct(rng, (2, 3, 4)))
    add("min", lambda t: t.min(axis=0), distinct(rng, (2, 3, 4)))
    add("stdev", lambda t: t.std(axis=2), x3)
    add("reshape", lambda t: t.reshape(4, 6), x3)
    add("transpose", lambda t: t.transpose(2, 0, 1), x3)
    add("flatten", lambda t: t.flatten(1), x3)
    add("getitem-slice", lambda t: t[:, 1:, ::2], x3)
    add("getitem-index", lambda t: t[np.array([0, 1, 1]), 2], x3)
    add("broadcast_to", lambda t: T.broadcast_to(t, (5, 3, 4)), a)
    add("concat", lambda t: T.concat([t, Tensor(b), t * 2.0], axis=0), a)
    m = rng.standard_normal((4, 5))
    add("matmul-left", lambda t: t @ Tensor(m), a)
    add("matmul-right", lambda t: Tensor(a) @ t, m)
    mb = rng.standard_normal((2, 4, 3))
    add("matmul-batched", lambda t: t @ Tensor(mb), x3)

    img = rng.standard_normal((2, 2, 6, 6))
    ker = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    add("conv2d-input", lambda t: T.conv2d(t, Tensor(ker), Tensor(bias)), img)
    add("conv2d-kernel", lambda t: T.conv2d(Tensor(img), t, Tensor(bias)), ker)
    add("conv2d-bias", lambda t: T.conv2d(Tensor(img), Tensor(ker), t), bias)
    add("conv2d-valid-stride2", lambda t: T.conv2d(t, Tensor(ker), None, stride=2, padding="valid"), img)
    add("conv2d-1x1", lambda t: T.conv2d(t, Tensor(ker[:, :, :1, :1].copy())), img)
    big = rng.standard_normal((2, 3, 12, 12))
    kbig = rng.standard_normal((2, 3, 3, 3))
    add("conv2d-wide-map", lambda t: T.conv2d(t, Tensor(kbig)), big)
    add("depthwise_conv2d", lambda t: T.depthwise_conv2d(t, L.BLUR_KERNEL), img)
    dimg = distinct(rng, (2, 2, 6, 6))
    add("pool_max-stride2", lambda t: T.pool_max(t, 2, 2), dimg)
    add("pool_max-stride1", lambda t: T.pool_max(t, 2, 1), dimg)
    for mode in ("zeros", "symmetric", "reflect", "edge"):
        add(f"pad-{mode}", lambda t, mode=mode: T.pad(t, [(0, 0), (0, 0), (1, 2), (2, 1)], mode), img)
    add("upsample_nearest", lambda t: T.upsample_nearest(t, 2), img)

    add("layer-aa_blur", L.aa_blur, img)
    add("layer-aa_maxpool", L.aa_maxpool, dimg)
    add("layer-max_pool-odd", L.max_pool, distinct(rng, (1, 2, 5, 5)))
    add("layer-coordconv", L.coordconv_augment, img)
    add("layer-minmax_normalize", L.minmax_normalize, dimg)
    add("layer-global_avg_pool", L.global_avg_pool, img)
    w_dense = rng.standard_normal((4, 3))
    add("layer-dense", lambda t: L.dense(t, Tensor(w_dense), Tensor(np.ones(3))), a)
    add("layer-softmax", L.softmax, a)

    ref = rng.uniform(0.1, 0.9, size=(2, 1, 16, 16))
    x_img = np.clip(ref + 0.1 * rng.standard_normal(ref.shape), 0.0, 1.0)
    add("loss-ssim", lambda t: LS.ssim(t, Tensor(ref)), x_img)
    ref32 = rng.uniform(0.1, 0.9, size=(1, 1, 32, 32))
    x32 = np.clip(ref32 + 0.1 * rng.standard_normal(ref32.shape), 0.0, 1.0)
    add("loss-ms_ssim", lambda t: LS.ms_ssim(t, Tensor(ref32)), x32)
    add("loss-ssp", lambda t: LS.loss_ssp(Tensor(ref32), t), x32)
    shift = rng.standard_normal((3, 2))
    add("loss-sscp", lambda t: LS.loss_sscp(Tensor(shift), t), rng.standard_normal((3, 2)))
    simplex = rng.dirichlet(np.ones(4), size=3)
    onehot = LS.one_hot([0, 2, 3], 4, np.float64)
    add("loss-focal", lambda t: LS.focal_loss(onehot, t), simplex)
    return checks


def gradcheck_config() -> M.ModelConfig:
    """Smallest topology that still exercises every layer kind and two MS-SSIM scales."""
    return M.ModelConfig(input_size=32, unet_depth=2, unet_width=2, backbone_widths=(2, 4))


def _central(params: M.ModelParams, name: str, i: int, eps: float, loss) -> float:
    flat = params[name].data.reshape(-1)
    orig = flat[i]
    flat[i] = orig + eps
    fp = loss(params)
    flat[i] = orig - eps
    fm = loss(params)
    flat[i] = orig
    return float((fp - fm) / (2 * eps))


def joint_loss_errors(seed: int, eps: float = MODEL_EPS, aa: bool = True) -> Dict[str, Tuple[float, float, float]]:
    """Per-parameter (max relative error, analytic, numeric at the worst
    coordinate) for the full joint loss on a two-sample batch.

    Central differences run in float64. Where they disagree with the
    analytic gradient by more than a tenth of the tolerance (tiny
    gradients drowned by rounding, or a step straddling a relu kink) the
    difference is recomputed in extended precision with a 100x smaller
    step before the error is recorded.
    """
    cfg = gradcheck_config()
    if not aa:
        cfg = replace(cfg, aa=False)
    params = M.build(cfg, seed).copy(dtype=np.float64)
    rng = np.random.default_rng([seed, 3])
    # zero biases behind dead units put relu inputs exactly on the kink, and
    # the zero-initialised shift outputs would block every gradient into the
    # regression convs; move to a generic point of parameter space
    for n in params.names:
        if n.endswith(".bias"):
            params[n].data = rng.uniform(-0.2, 0.2, size=params[n].shape)
        elif n.startswith(("xPosEstimate", "yPosEstimate")):
            params[n].data = rng.normal(0.0, 0.3, size=params[n].shape)
    images = rng.uniform(0, 1, size=(2, 1, cfg.input_size, cfg.input_size))
    labels = np.array([0, 2])
    shifts = np.array([[np.nan, np.nan], [3.0, -5.0]])

    def breakdown(p):
        x = images.astype(p[p.names[0]].dtype)
        return LS.joint_loss(x, M.forward(p, x), labels, shifts, 1e-6, 0.1)

    def loss(p):
        return breakdown(p).total_tensor.data

    params.zero_grad()
    breakdown(params).total_tensor.backward()
    extended = params.copy(dtype=np.longdouble, requires_grad=False)
    report = {}
    with T.no_grad():
        for n in params.names:
            t = params[n]
            analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1).copy()
            numeric = np.array([_central(params, n, i, eps, loss) for i in range(t.size)])
            err = T.relative_error(analytic, numeric, FLOOR)
            for i in np.flatnonzero(err > TOLERANCE / 10):
                numeric[i] = _central(extended, n, int(i), eps / 100, loss)
            err = T.relative_error(analytic, numeric, FLOOR)
            # exact invariances (the min-max normalisation cancels the last
            # enhancement bias) leave only rounding noise in the difference
            err[np.maximum(np.abs(analytic), np.abs(numeric)) < INVARIANT_NOISE] = 0.0
            k = int(err.argmax())
            report[n] = (float(err[k]), float(analytic[k]), float(numeric[k]))
    return report


def joint_loss_check(seed: int, eps: float = MODEL_EPS, aa: bool = True) -> float:
    return max(e for e, _, _ in joint_loss_errors(seed, eps, aa).values())


def run_suite(seed: int = 0, include_model: bool = True) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, x in op_checks(rng):
        t0 = time.perf_counter()
        err = T.finite_diff_check(fn, Tensor(np.asarray(x, dtype=np.float64)), EPS, FLOOR)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    if include_model:
        t0 = time.perf_counter()
        err = joint_loss_check(seed)
        results.append(CheckResult("joint-loss-all-parameters", err, time.perf_counter() - t0))
    return results
