"""Evaluation instruments: PR curves and average precision, confusion
matrices, range-binned scores, the nine-crop shift-invariance score,
magnitude pruning and averaged image spectra.

All report writers emit plain CSV with a header row.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import data as D
from . import model as M
from .errors import DatasetError, ShapeError
from .tensor import Tensor, no_grad

RANGE_BIN_M = 10.0
EVAL_CHUNK = 64


def target_score(probabilities) -> np.ndarray:
    """One-versus-all target score: summed target-class probability,
    computed as 1 - p(background)."""
    p = np.asarray(probabilities, dtype=np.float64)
    return 1.0 - p[..., 0]


@dataclass
class PRCurve:
    """Precision/recall at each distinct score threshold (ascending)."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    area: float


def aucpr(scores, labels) -> PRCurve:
    """Average precision: sum over descending thresholds of
    (R_k - R_{k-1}) * P_k, tied scores forming one threshold."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DatasetError("AUCPR needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends].astype(np.float64)
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    area = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(s[ends][::-1].copy(), precision[::-1].copy(), recall[::-1].copy(), area)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def from_predictions(cls, labels, predicted, num_classes: int = D.NUM_CLASSES) -> "ConfusionMatrix":
        m = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(m, (np.asarray(labels, dtype=np.intp), np.asarray(predicted, dtype=np.intp)), 1)
        return cls(m)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())


@dataclass
class EvalReport:
    labels: np.ndarray
    probabilities: np.ndarray
    scores: np.ndarray
    range_m: np.ndarray
    confusion: ConfusionMatrix
    overall: PRCurve
    per_class: Dict[int, Optional[PRCurve]]
    range_bins: List[dict]
    crops_per_image: int = 1
    psi: Optional[np.ndarray] = None

    @property
    def inferences(self) -> int:
        return int(self.labels.size)

    @property
    def aucpr(self) -> float:
        return self.overall.area


Scorer = Callable[[np.ndarray], np.ndarray]


def model_scorer(params: M.ModelParams, enhance: bool = True,
                 preprocess: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Scorer:
    """Map ``[N,1,H,W]`` image batches to class probabilities ``[N,K]``."""

    def run(images: np.ndarray) -> np.ndarray:
        out = []
        with no_grad():
            for k in range(0, len(images), EVAL_CHUNK):
                chunk = images[k:k + EVAL_CHUNK]
                if preprocess is not None:
                    chunk = preprocess(chunk)
                res = M.forward(params, chunk, enhance=enhance, heads=("c",))
                out.append(res["probabilities"].data.astype(np.float64))
        return np.concatenate(out)

    return run


def _as_scorer(model) -> Scorer:
    return model_scorer(model) if isinstance(model, M.ModelParams) else model


def validation_origins(dataset: D.Dataset, idx: Sequence[int]) -> np.ndarray:
    """One random crop origin per image, fixed by the dataset seed so every
    run and ablation validates on identical crops."""
    rng = np.random.default_rng([dataset.manifest.seed, 7])
    span = dataset.chip - dataset.crop + 1
    origins = rng.integers(0, span, size=(len(dataset), 2))
    return origins[np.asarray(idx, dtype=np.intp)]


def crop_images(dataset: D.Dataset, idx: Sequence[int], mode: str = "center") -> np.ndarray:
    """``[N,1,crop,crop]`` for ``mode`` in {center, random}; ``nine`` gives ``[N*9,1,crop,crop]``."""
    idx = np.asarray(idx, dtype=np.intp)
    crop = dataset.crop
    if mode == "nine":
        out = np.stack([D.nine_crops(dataset.images[i], crop) for i in idx])
        return out.reshape(len(idx) * 9, 1, crop, crop)
    if mode == "center":
        c0 = D.center_origin(dataset.chip, crop)
        origins = np.full((len(idx), 2), c0)
    elif mode == "random":
        origins = validation_origins(dataset, idx)
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    out = np.empty((len(idx), 1, crop, crop), dtype=np.float32)
    for k, (i, (r, c)) in enumerate(zip(idx, origins)):
        out[k, 0] = dataset.images[i, r:r + crop, c:c + crop]
    return out


def range_aucpr(scores, labels, range_m, width: float = RANGE_BIN_M,
                lo: float = D.RANGE_M[0], hi: float = D.RANGE_M[1]) -> List[dict]:
    """AUCPR per range bin; bins lacking either class report NaN."""
    scores, labels, range_m = (np.asarray(a) for a in (scores, labels, range_m))
    rows = []
    n_bins = int(math.ceil((hi - lo) / width))
    for b in range(n_bins):
        a, z = lo + b * width, lo + (b + 1) * width
        sel = (range_m >= a) & ((range_m < z) | ((b == n_bins - 1) & (range_m <= z)))
        pos = int((labels[sel] != 0).sum())
        area = float("nan")
        if 0 < pos < sel.sum():
            area = aucpr(scores[sel], labels[sel] != 0).area
        rows.append({"range_lo": a, "range_hi": z, "count": int(sel.sum()), "positives": pos, "aucpr": area})
    return rows


def evaluate(model, dataset: D.Dataset, split: str = "val", nine_crops: bool = False,
             crop_mode: str = "center") -> EvalReport:
    """Score every crop of ``split``; with ``nine_crops`` each image yields 9 inferences."""
    idx = dataset.indices(split)
    if idx.size == 0:
        raise DatasetError(f"split {split!r} is empty")
    if isinstance(model, M.ModelParams) and model.config.input_size != dataset.crop:
        raise ShapeError(f"model expects {model.config.input_size} px crops, dataset crops are {dataset.crop} px")
    scorer = _as_scorer(model)
    mode = "nine" if nine_crops else crop_mode
    images = crop_images(dataset, idx, mode)
    probs = scorer(images)
    reps = 9 if nine_crops else 1
    labels = np.repeat(dataset.labels(idx), reps)
    rng_m = np.repeat([dataset.manifest.records[i].range_m for i in idx], reps)
    scores = target_score(probs)
    conf = ConfusionMatrix.from_predictions(labels, probs.argmax(axis=1), probs.shape[1])
    overall = aucpr(scores, labels != 0)
    per_class: Dict[int, Optional[PRCurve]] = {}
    for k in range(probs.shape[1]):
        pos = labels == k
        per_class[k] = aucpr(probs[:, k], pos) if 0 < pos.sum() < pos.size else None
    psi = scores.reshape(-1, 9).std(axis=1) if nine_crops else None
    return EvalReport(labels, probs, scores, rng_m, conf, overall, per_class,
                      range_aucpr(scores, labels, rng_m), reps, psi)


def validation_aucpr(model, dataset: D.Dataset) -> float:
    return evaluate(model, dataset, "val", crop_mode="random").aucpr


# ---------------------------------------------------------------------------
# shift invariance


def psi(scores) -> float:
    """Population standard deviation of the nine target scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size != 9:
        raise ShapeError(f"shift-invariance score needs 9 scores, got {s.size}")
    return float(s.std())


def shift_invariance_score(model, image: np.ndarray, crop: int = D.CROP, shift: int = D.SHIFT_PX) -> float:
    crops = D.nine_crops(np.asarray(image), crop, shift)[:, None]
    return psi(target_score(_as_scorer(model)(crops)))


def mean_shift_invariance(model, dataset: D.Dataset, idx: Sequence[int]) -> np.ndarray:
    """Per-image Psi over ``idx`` (one batched pass)."""
    idx = np.asarray(idx, dtype=np.intp)
    images = crop_images(dataset, idx, "nine")
    scores = target_score(_as_scorer(model)(images)).reshape(len(idx), 9)
    return scores.std(axis=1)


# ---------------------------------------------------------------------------
# pruning


def prunable(params: M.ModelParams) -> List[str]:
    return [n for n in params.names if not n.endswith(".bias")]


def prune_by_magnitude(params: M.ModelParams, proportion: float) -> M.ModelParams:
    """Zero the smallest-magnitude ``proportion`` of all non-bias weights
    (one global ranking, stable on ties). Returns a copy."""
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"pruning proportion must be in [0, 1], got {proportion}")
    out = params.copy(requires_grad=False)
    names = prunable(out)
    flat = np.concatenate([np.abs(out[n].data).ravel() for n in names])
    k = int(math.floor(proportion * flat.size + 1e-9))
    if k == 0:
        return out
    mask = np.ones(flat.size, dtype=bool)
    mask[np.argsort(flat, kind="stable")[:k]] = False
    pos = 0
    for n in names:
        t = out[n]
        m = mask[pos:pos + t.size].reshape(t.shape)
        t.data = np.where(m, t.data, 0).astype(t.dtype)
        pos += t.size
    return out


def prune_sweep(params: M.ModelParams, dataset: D.Dataset, proportions: Sequence[float],
                split: str = "val", crop_mode: str = "random") -> List[dict]:
    rows = []
    total = sum(params[n].size for n in prunable(params))
    for p in proportions:
        pruned = prune_by_magnitude(params, float(p))
        zeros = int(sum((pruned[n].data == 0).sum() for n in prunable(pruned)))
        area = evaluate(pruned, dataset, split, crop_mode=crop_mode).aucpr
        rows.append({"proportion": float(p), "zeroed": zeros, "weights": total, "aucpr": area})
    return rows


# ---------------------------------------------------------------------------
# spectra


def hamming_2d(h: int, w: int) -> np.ndarray:
    return np.outer(np.hamming(h), np.hamming(w))


def avg_spectrum(images: np.ndarray, window: bool = True) -> np.ndarray:
    """Mean Hamming-windowed 2-D DFT magnitude, zero frequency centred.

    ``window=False`` skips the taper; the window's own main lobe and side
    lobes otherwise leak DC into neighbouring bins at about 1e-2.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    if imgs.shape[0] == 0:
        raise DatasetError("no images to average")
    if window:
        imgs = imgs * hamming_2d(*imgs.shape[1:])
    mag = np.abs(np.fft.fft2(imgs))
    return np.fft.fftshift(mag.mean(axis=0))


def spectrum_images(dataset: D.Dataset, params: Optional[M.ModelParams] = None,
                    split: str = "val") -> np.ndarray:
    """Centre crops of the target-class images of ``split``, passed through
    the enhancement network when ``params`` is given."""
    idx = [i for i in dataset.indices(split) if dataset.manifest.records[i].label != 0]
    if not idx:
        raise DatasetError(f"split {split!r} has no target-class images")
    images = crop_images(dataset, idx, "center")
    if params is None:
        return images[:, 0]
    out = []
    with no_grad():
        for k in range(0, len(images), EVAL_CHUNK):
            res = M.forward(params, images[k:k + EVAL_CHUNK], heads=("c",))
            out.append(res["x_enhanced"].data[:, 0].astype(np.float64))
    return np.concatenate(out)


def spectrum_frequencies(n: int) -> np.ndarray:
    return np.fft.fftshift(np.fft.fftfreq(n))


# ---------------------------------------------------------------------------
# CSV writers


def _write_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_pr_curve(path, report: EvalReport) -> None:
    rows = []
    curves = [("all", report.overall)] + [
        (D.CLASS_NAMES[k] if k < len(D.CLASS_NAMES) else str(k), c) for k, c in report.per_class.items()]
    for name, c in curves:
        if c is None:
            continue
        for t, p, r in zip(c.thresholds, c.precision, c.recall):
            rows.append((name, t, p, r, c.area))
    _write_csv(path, ("curve", "threshold", "precision", "recall", "aucpr"), rows)


def write_confusion(path, report: EvalReport) -> None:
    k = report.confusion.counts.shape[0]
    names = [D.CLASS_NAMES[i] if i < len(D.CLASS_NAMES) else str(i) for i in range(k)]
    rows = [(names[i], *report.confusion.counts[i].tolist()) for i in range(k)]
    _write_csv(path, ("true\\predicted", *names), rows)


def write_range_aucpr(path, report: EvalReport) -> None:
    rows = [(b["range_lo"], b["range_hi"], b["count"], b["positives"], b["aucpr"]) for b in report.range_bins]
    _write_csv(path, ("range_lo_m", "range_hi_m", "count", "positives", "aucpr"), rows)


def write_psi(path, psi_values, labels) -> None:
    psi_values = np.asarray(psi_values)
    rows = [(i, int(l), float(v)) for i, (l, v) in enumerate(zip(labels, psi_values))]
    rows.append(("mean", "", float(psi_values.mean())))
    _write_csv(path, ("image", "label", "psi"), rows)


def write_prune_sweep(path, rows: List[dict]) -> None:
    _write_csv(path, ("proportion", "zeroed", "weights", "aucpr"),
               [(r["proportion"], r["zeroed"], r["weights"], r["aucpr"]) for r in rows])


def write_spectrum(path, spectrum: np.ndarray) -> None:
    h, w = spectrum.shape
    fy, fx = spectrum_frequencies(h), spectrum_frequencies(w)
    rows = [(fy[i], fx[j], spectrum[i, j]) for i in range(h) for j in range(w)]
    _write_csv(path, ("freq_row", "freq_col", "magnitude"), rows)
