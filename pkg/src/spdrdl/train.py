"""Training loop: balanced mini-batches, random-crop augmentation, joint
loss, RMSProp updates and early stopping on validation AUCPR."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from . import evaluate as E
from . import kvconfig
from . import losses as L
from . import model as M
from .errors import ConfigError, NumericalError, ShapeError
from .tensor import Tensor

DESPECKLERS = ("none", "gaussian", "median")
GAUSS_SIGMA = 1.0
GAUSS_SIZE = 5
MEDIAN_SIZE = 3

LOG_COLUMNS = ("epoch", "method", "n_train", "lambda1", "lambda2", "focal", "ssp", "sscp",
               "total", "w", "val_aucpr", "best")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lambda1: float = 1e-6
    lambda2: float = 0.1
    batch: int = 16
    max_epochs: int = 100
    patience: int = 10
    rho: float = 0.9
    eps: float = 1e-7
    alpha: float = 0.25
    gamma: float = 2.0
    use_ssp: bool = True
    use_sscp: bool = True
    fixed_despeckler: str = "none"
    train_fraction: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.fixed_despeckler not in DESPECKLERS:
            raise ConfigError(f"fixed_despeckler must be one of {DESPECKLERS}")
        if self.fixed_despeckler != "none" and self.use_ssp:
            raise ConfigError("a fixed despeckler replaces the enhancement network; disable the SSP term")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")
        if self.batch < 2 or self.batch % 2:
            raise ConfigError("batch must be even (half background, half target)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if not 0 <= self.rho < 1 or self.eps < 0:
            raise ConfigError("rmsprop needs 0 <= rho < 1 and eps >= 0")

    @property
    def effective_lambda1(self) -> float:
        return self.lambda1 if self.use_ssp else 0.0

    @property
    def effective_lambda2(self) -> float:
        return self.lambda2 if self.use_sscp else 0.0

    @property
    def method(self) -> str:
        name = "CL"
        if self.use_ssp:
            name += "+SSP"
        if self.use_sscp:
            name += "+SSCP"
        if self.fixed_despeckler != "none":
            name += f"+{self.fixed_despeckler.capitalize()}Filter"
        return name

    def to_text(self) -> str:
        return kvconfig.dumps(kvconfig.to_mapping(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return kvconfig.from_mapping(cls, kvconfig.loads(text))


# ---------------------------------------------------------------------------
# optimiser


def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                 state: Optional[Sequence[np.ndarray]], lr: float, rho: float = 0.9,
                 eps: float = 1e-7) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """s <- rho*s + (1-rho)*g^2 ; theta <- theta - lr*g/(sqrt(s)+eps).

    Pure function: returns new parameter and state arrays.
    """
    if state is None:
        state = [np.zeros_like(p) for p in params]
    if not len(params) == len(grads) == len(state):
        raise ShapeError("params, grads and state differ in length")
    new_p, new_s = [], []
    for p, g, s in zip(params, grads, state):
        p, g, s = np.asarray(p), np.asarray(g), np.asarray(s)
        if not p.shape == g.shape == s.shape:
            raise ShapeError(f"rmsprop shape mismatch: {p.shape}, {g.shape}, {s.shape}")
        s2 = rho * s + (1 - rho) * g * g
        new_s.append(s2.astype(p.dtype, copy=False))
        new_p.append((p - lr * g / (np.sqrt(s2) + eps)).astype(p.dtype, copy=False))
    return new_p, new_s


class RMSProp:
    """In-place RMSProp over a :class:`~spdrdl.model.ModelParams`."""

    def __init__(self, params: M.ModelParams, lr: float, rho: float = 0.9, eps: float = 1e-7):
        self.params = params
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self) -> None:
        lr, rho, eps = np.float32(self.lr), np.float32(self.rho), np.float32(self.eps)
        for n, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            s = self.state[n]
            s *= rho
            s += (1 - rho) * g * g
            t.data -= lr * g / (np.sqrt(s) + eps)


# ---------------------------------------------------------------------------
# fixed despeckling filters


def gaussian_kernel(sigma: float = GAUSS_SIGMA, size: int = GAUSS_SIZE) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _windows(img: np.ndarray, size: int) -> np.ndarray:
    pad = size // 2
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(pad, pad), (pad, pad)], mode="reflect")
    return np.lib.stride_tricks.sliding_window_view(p, (size, size), axis=(-2, -1))


def fixed_despeckle(image: np.ndarray, kind: str) -> np.ndarray:
    """Classical filter over the last two axes (reflect borders):
    ``gaussian`` (sigma 1, 5x5) or ``median`` (3x3)."""
    img = np.asarray(image)
    if kind == "gaussian":
        k = gaussian_kernel()
        return np.einsum("...ij,ij->...", _windows(img, GAUSS_SIZE), k).astype(img.dtype)
    if kind == "median":
        w = _windows(img, MEDIAN_SIZE)
        return np.median(w.reshape(*w.shape[:-2], -1), axis=-1).astype(img.dtype)
    if kind == "none":
        return img
    raise ConfigError(f"unknown despeckler {kind!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    focal: float
    ssp: float
    sscp: float
    total: float
    w: float
    val_aucpr: float
    wall_time: float


@dataclass
class TrainLog:
    method: str
    n_train: int
    lambda1: float
    lambda2: float
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_aucpr(self) -> float:
        return max(e.val_aucpr for e in self.epochs) if self.epochs else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for e in self.epochs:
            w.writerow([e.epoch, self.method, self.n_train, repr(self.lambda1), repr(self.lambda2),
                        repr(e.focal), repr(e.ssp), repr(e.sscp), repr(e.total), repr(e.w),
                        repr(e.val_aucpr), int(e.epoch == self.best_epoch)])
        return buf.getvalue()

    def timing_csv(self) -> str:
        return "epoch,wall_time_s\n" + "".join(f"{e.epoch},{e.wall_time:.3f}\n" for e in self.epochs)


def first_nonfinite(named: Sequence[Tuple[str, np.ndarray]]) -> Optional[str]:
    for name, arr in named:
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


def _check_finite(images, outputs: Dict[str, Tensor], breakdown: L.LossBreakdown,
                  params: M.ModelParams, epoch: int, step: int) -> None:
    if math.isfinite(breakdown.total) and all(
            t.grad is None or np.all(np.isfinite(t.grad)) for _, t in params.items()):
        return
    named = [("input", images)]
    named += [(f"param {n}", t.data) for n, t in params.items()]
    named += [(f"activation {k}", v.data) for k, v in outputs.items()]
    named += [(f"loss {k}", np.asarray(getattr(breakdown, k))) for k in ("focal", "ssp", "sscp", "total")]
    named += [(f"gradient {n}", t.grad) for n, t in params.items()]
    culprit = first_nonfinite(named) or "unknown tensor"
    raise NumericalError(f"non-finite value at epoch {epoch}, step {step}: first offender is {culprit}")


def train_step(params: M.ModelParams, opt: RMSProp, images: np.ndarray, labels: np.ndarray,
               shifts: np.ndarray, cfg: TrainConfig, epoch: int = 0, step: int = 0) -> L.LossBreakdown:
    enhance = cfg.fixed_despeckler == "none"
    if not enhance:
        images = fixed_despeckle(images, cfg.fixed_despeckler)
    outputs = M.forward(params, images, enhance=enhance, keep=True)
    lb = L.joint_loss(images, outputs, labels, shifts, cfg.effective_lambda1, cfg.effective_lambda2,
                      cfg.alpha, cfg.gamma)
    params.zero_grad()
    if math.isfinite(lb.total):
        lb.total_tensor.backward()
    _check_finite(images, outputs, lb, params, epoch, step)
    opt.step()
    lb.total_tensor = None
    return lb


def evaluation_scorer(params: M.ModelParams, cfg: TrainConfig):
    if cfg.fixed_despeckler == "none":
        return E.model_scorer(params)
    return E.model_scorer(params, enhance=False,
                          preprocess=lambda x: fixed_despeckle(x, cfg.fixed_despeckler))


def train(model_cfg: M.ModelConfig, cfg: TrainConfig, dataset: D.Dataset, seed: int,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[M.ModelParams, TrainLog]:
    """Train from a seeded initialisation; returns the best-validation parameters.

    The seed drives initialisation, the training subset, batch composition
    and crops, so runs that differ only in loss weights see the same data.
    """
    if dataset.indices("train").size == 0 or dataset.indices("val").size == 0:
        raise ConfigError("dataset needs both a train and a val split")
    if dataset.crop != model_cfg.input_size:
        raise ShapeError(f"dataset crop {dataset.crop} != model input {model_cfg.input_size}")
    ds = dataset.subset_train(cfg.train_fraction, seed) if cfg.train_fraction < 1 else dataset
    train_idx = ds.indices("train")
    train_labels = ds.labels(train_idx)

    params = M.build(model_cfg, seed)
    opt = RMSProp(params, cfg.lr, cfg.rho, cfg.eps)
    rng = np.random.default_rng([seed, 11])
    log = TrainLog(cfg.method, int(train_idx.size), cfg.effective_lambda1, cfg.effective_lambda2)
    best = params.copy(requires_grad=False)
    best_score, since_best = -math.inf, 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(5)
        nb = 0
        for step, b in enumerate(D.batch_sampler(train_labels, rng, cfg.batch)):
            images, labels, shifts = D.augment_batch(ds, train_idx[b], rng)
            lb = train_step(params, opt, images, labels, shifts, cfg, epoch, step)
            sums += (lb.focal, lb.ssp, lb.sscp, lb.total, lb.w)
            nb += 1
        params.zero_grad()
        score = E.evaluate(evaluation_scorer(params, cfg), ds, "val", crop_mode="random").aucpr
        m = sums / nb
        rec = EpochRecord(epoch, *map(float, m), float(score), time.perf_counter() - t0)
        log.epochs.append(rec)
        if score > best_score:
            best_score, since_best = score, 0
            best = params.copy(requires_grad=False)
            log.best_epoch = epoch
        else:
            since_best += 1
        if on_epoch is not None:
            on_epoch(rec)
        if since_best >= cfg.patience:
            log.stopped_early = True
            break
    for t in best.tensors.values():
        t.requires_grad = True
    return best, log
