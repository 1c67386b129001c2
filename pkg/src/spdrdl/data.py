"""Synthetic sonar-like chips: speckled seafloor with optional man-made targets.

Every chip is a square of fully developed speckle. Target chips multiply a
class-specific reflectivity template (bright highlight followed by a dark
acoustic shadow trailing along +column, the range direction) into the
speckle field. Highlight contrast falls off inversely with range, so far
targets are harder to see.

On disk a dataset is a directory holding ``manifest.json`` (canonical,
sorted keys) and ``images.bin`` (little-endian float32 chips in record
order).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DatasetError, ShapeError

FORMAT_VERSION = 1
CLASS_NAMES = ("background", "cylinder", "truncated-cone", "wedge")
NUM_CLASSES = len(CLASS_NAMES)

CHIP = 96
CROP = 64
SHIFT_PX = 16
JITTER_PX = 2.0
PIXEL_PITCH_CM = 1.5
RANGE_M = (40.0, 150.0)

# highlight contrast at the nearest range; scaled by RANGE_M[0] / range
HIGHLIGHT_GAIN = 0.8
SHADOW_LEVEL = 0.72
SHADOW_LENGTH = 14
SMOOTH_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
TEMPLATE_MIN_CHIP = 40

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "images.bin"
BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Sample:
    image: np.ndarray
    label: int
    p_center: Optional[Tuple[float, float]]
    range_m: float
    angle: float = 0.0
    split: str = "train"

    def __post_init__(self):
        if self.label not in range(NUM_CLASSES):
            raise DatasetError(f"label {self.label} outside 0..{NUM_CLASSES - 1}")
        if (self.p_center is None) != (self.label == 0):
            raise DatasetError("p_center must be given exactly for target-class samples")


@dataclass
class Record:
    offset: int
    label: int
    p_center: Optional[Tuple[float, float]]
    range_m: float
    angle: float
    split: str

    def to_json(self) -> dict:
        return {
            "offset": self.offset,
            "label": self.label,
            "p_center": None if self.p_center is None else [float(v) for v in self.p_center],
            "range_m": float(self.range_m),
            "angle": float(self.angle),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Record":
        pc = d.get("p_center")
        return cls(int(d["offset"]), int(d["label"]), None if pc is None else (float(pc[0]), float(pc[1])),
                   float(d["range_m"]), float(d.get("angle", 0.0)), str(d["split"]))


@dataclass
class DatasetManifest:
    chip: int
    crop: int
    records: List[Record]
    seed: int = 0
    imbalance: float = 4.0
    pixel_pitch_cm: float = PIXEL_PITCH_CM
    version: int = FORMAT_VERSION
    class_counts: Dict[str, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            self.class_counts = self.count_classes()

    def count_classes(self) -> Dict[str, List[int]]:
        out = {}
        for split in ("train", "val"):
            c = [0] * NUM_CLASSES
            for r in self.records:
                if r.split == split:
                    c[r.label] += 1
            out[split] = c
        return out

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split == split], dtype=np.intp)

    @property
    def blob_size(self) -> int:
        return len(self.records) * self.chip * self.chip * BLOB_DTYPE.itemsize

    def validate(self) -> None:
        step = self.chip * self.chip * BLOB_DTYPE.itemsize
        offsets = sorted(r.offset for r in self.records)
        for a, b in zip(offsets, offsets[1:]):
            if b - a < step:
                raise DatasetError(f"overlapping blob offsets {a} and {b}")
        if any(r.split not in ("train", "val") for r in self.records):
            raise DatasetError("split tags must be 'train' or 'val'")
        if self.count_classes() != self.class_counts:
            raise DatasetError("recorded class counts do not match the records")

    def to_json(self) -> str:
        body = {
            "version": self.version,
            "chip": self.chip,
            "crop": self.crop,
            "pixel_pitch_cm": self.pixel_pitch_cm,
            "seed": self.seed,
            "imbalance": self.imbalance,
            "class_counts": self.class_counts,
            "records": [r.to_json() for r in self.records],
        }
        return json.dumps(body, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest is not valid JSON: {exc}") from None
        if d.get("version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format version {d.get('version')!r}")
        m = cls(int(d["chip"]), int(d["crop"]), [Record.from_json(r) for r in d["records"]],
                int(d.get("seed", 0)), float(d.get("imbalance", 4.0)),
                float(d.get("pixel_pitch_cm", PIXEL_PITCH_CM)), int(d["version"]),
                {k: list(v) for k, v in d["class_counts"].items()})
        m.validate()
        return m


class Dataset:
    """A manifest plus the chip array it indexes (``images[i]`` is record i)."""

    def __init__(self, manifest: DatasetManifest, images: np.ndarray):
        if images.shape != (len(manifest.records), manifest.chip, manifest.chip):
            raise DatasetError(f"image array {images.shape} does not match manifest")
        self.manifest = manifest
        self.images = images

    def __len__(self) -> int:
        return len(self.manifest.records)

    @property
    def chip(self) -> int:
        return self.manifest.chip

    @property
    def crop(self) -> int:
        return self.manifest.crop

    def indices(self, split: str) -> np.ndarray:
        return self.manifest.indices(split)

    def labels(self, idx=None) -> np.ndarray:
        lab = np.array([r.label for r in self.manifest.records], dtype=np.intp)
        return lab if idx is None else lab[idx]

    def sample(self, i: int) -> Sample:
        r = self.manifest.records[i]
        return Sample(self.images[i], r.label, r.p_center, r.range_m, r.angle, r.split)

    def subset_train(self, fraction: float, seed: int) -> "Dataset":
        """Keep floor(fraction * N_train) training records (seeded choice),
        all validation records."""
        if not 0 < fraction <= 1:
            raise DatasetError(f"training fraction must be in (0, 1], got {fraction}")
        train = self.indices("train")
        keep_n = int(math.floor(fraction * len(train)))
        if keep_n < 1:
            raise DatasetError("training fraction leaves no training samples")
        rng = np.random.default_rng([seed, 0x5EED])
        kept = np.sort(rng.choice(train, size=keep_n, replace=False))
        idx = np.sort(np.concatenate([kept, self.indices("val")]))
        step = self.chip * self.chip * BLOB_DTYPE.itemsize
        recs = []
        for k, i in enumerate(idx):
            r = self.manifest.records[i]
            recs.append(Record(k * step, r.label, r.p_center, r.range_m, r.angle, r.split))
        m = DatasetManifest(self.chip, self.crop, recs, self.manifest.seed, self.manifest.imbalance,
                            self.manifest.pixel_pitch_cm)
        return Dataset(m, self.images[idx])


# ---------------------------------------------------------------------------
# physics


def speckle_field(rng: np.random.Generator, shape, mean: float = 1.0) -> np.ndarray:
    """Fully developed speckle: i.i.d. exponential intensity (std == mean)."""
    return rng.exponential(mean, size=shape)


def range_mean(range_m: float) -> float:
    """Mean backscatter intensity, decaying with two-way spreading."""
    return (RANGE_M[0] / range_m) ** 2


def highlight_contrast(range_m: float) -> float:
    return HIGHLIGHT_GAIN * RANGE_M[0] / range_m


def _smooth(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="symmetric")
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            out += SMOOTH_KERNEL[i, j] * p[i:i + h, j:j + w]
    return out


def _minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def object_mask(label: int, angle: float, size: int, center: Tuple[float, float]) -> np.ndarray:
    """Boolean highlight footprint of a target on a ``size`` x ``size`` grid.

    ``center`` is (row, col) in pixel coordinates. Shapes are evaluated at
    pixel centres, so sub-pixel centres render faithfully.
    """
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    dr, dc = rr - center[0], cc - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dc + sa * dr          # along-axis
    v = -sa * dc + ca * dr         # across-axis
    if label == 1:                 # cylinder: oriented rectangle
        return (np.abs(u) <= 9.0) & (np.abs(v) <= 3.0)
    if label == 2:                 # truncated cone seen from above: disk
        return dr ** 2 + dc ** 2 <= 6.0 ** 2
    if label == 3:                 # wedge: isoceles triangle, apex along +u
        return (u >= -6.0) & (u <= 7.0) & (np.abs(v) <= (7.0 - u) * 0.5)
    raise DatasetError(f"no template for label {label}")


def shadow_mask(obj: np.ndarray, length: int = SHADOW_LENGTH) -> np.ndarray:
    """Pixels occluded by ``obj`` when insonified from the left (-column)."""
    sh = np.zeros_like(obj)
    for t in range(1, length + 1):
        sh[:, t:] |= obj[:, :-t]
    return sh & ~obj


def reflectivity(label: int, angle: float, size: int, center: Tuple[float, float],
                 range_m: float) -> np.ndarray:
    """Multiplicative scene map: 1 on the seafloor, highlight on the object,
    a darkened shadow behind it."""
    refl = np.ones((size, size))
    if label == 0:
        return refl
    obj = object_mask(label, angle, size, center)
    refl[shadow_mask(obj)] = SHADOW_LEVEL
    refl[obj] = 1.0 + highlight_contrast(range_m)
    return refl


def template(label: int, angle: float, size: int = 49, range_m: float = RANGE_M[0]) -> np.ndarray:
    """Zero-mean matched-filter template, object centred in an odd ``size`` patch.

    The highlight contrast depends on range, so a template rendered at the
    scene's range is the one actually matched to it.
    """
    c = (size - 1) / 2
    t = reflectivity(label, angle, size, (c, c), range_m)
    return t - t.mean()


def render(label: int, angle: float, p_center, range_m: float, chip: int,
           rng: np.random.Generator) -> np.ndarray:
    center = chip // 2
    pc = (0.0, 0.0) if p_center is None else p_center
    refl = reflectivity(label, angle, chip, (center + pc[0], center + pc[1]), range_m)
    raw = speckle_field(rng, (chip, chip), range_mean(range_m)) * refl
    return _minmax(_smooth(raw)).astype(np.float32)


# ---------------------------------------------------------------------------
# generation


def split_counts(n: int, imbalance: float) -> List[int]:
    """Per-class counts for ``n`` chips at background:target = imbalance:1,
    targets split evenly over the three classes (remainder to lower labels)."""
    if n <= 0:
        raise DatasetError(f"sample count must be positive, got {n}")
    if imbalance <= 0:
        raise DatasetError(f"imbalance ratio must be positive, got {imbalance}")
    n_bg = int(round(n * imbalance / (imbalance + 1)))
    n_bg = min(max(n_bg, 1), n - 3) if n >= 4 else n_bg
    n_t = n - n_bg
    per = [n_t // 3 + (1 if k < n_t % 3 else 0) for k in range(3)]
    return [n_bg] + per


def generate(seed: int, n_train: int = 4000, n_val: int = 1000, chip: int = CHIP, crop: int = CROP,
             imbalance: float = 4.0) -> Dataset:
    """Build a dataset deterministically from ``seed``.

    Record order interleaves classes via a seeded permutation; sample ``i``
    draws everything from its own stream spawned off the dataset seed.
    """
    if chip < TEMPLATE_MIN_CHIP:
        raise ShapeError(f"chip extent {chip} too small for target templates (need >= {TEMPLATE_MIN_CHIP})")
    if not 0 < crop < chip:
        raise ShapeError(f"crop extent {crop} must be positive and smaller than chip {chip}")
    plan = []
    for split, n in (("train", n_train), ("val", n_val)):
        for label, k in enumerate(split_counts(n, imbalance)):
            plan += [(split, label)] * k
    order_rng = np.random.default_rng([seed, 1])
    order = np.concatenate([
        order_rng.permutation([i for i, p in enumerate(plan) if p[0] == s]) for s in ("train", "val")
    ])
    streams = np.random.SeedSequence([seed, 2]).spawn(len(plan))
    step = chip * chip * BLOB_DTYPE.itemsize
    images = np.empty((len(plan), chip, chip), dtype=np.float32)
    records = []
    for k, i in enumerate(order):
        split, label = plan[i]
        rng = np.random.default_rng(streams[k])
        range_m = float(rng.uniform(*RANGE_M))
        angle = float(rng.uniform(0, math.pi)) if label else 0.0
        p_center = (float(rng.uniform(-JITTER_PX, JITTER_PX)),
                    float(rng.uniform(-JITTER_PX, JITTER_PX))) if label else None
        images[k] = render(label, angle, p_center, range_m, chip, rng)
        records.append(Record(k * step, label, p_center, range_m, angle, split))
    manifest = DatasetManifest(chip, crop, records, int(seed), float(imbalance))
    return Dataset(manifest, images)


def save(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / MANIFEST_NAME).write_text(dataset.manifest.to_json())
    dataset.images.astype(BLOB_DTYPE).tofile(d / BLOB_NAME)


def load(directory) -> Dataset:
    d = Path(directory)
    mpath, bpath = d / MANIFEST_NAME, d / BLOB_NAME
    if not mpath.is_file() or not bpath.is_file():
        raise DatasetError(f"{d} is not a dataset directory (need {MANIFEST_NAME} and {BLOB_NAME})")
    manifest = DatasetManifest.from_json(mpath.read_text())
    raw = np.fromfile(bpath, dtype=BLOB_DTYPE)
    n, c = len(manifest.records), manifest.chip
    if raw.size * BLOB_DTYPE.itemsize != manifest.blob_size:
        raise DatasetError(f"blob holds {raw.size} values, manifest expects {n * c * c}")
    flat = raw.reshape(n, c * c)
    per = c * c * BLOB_DTYPE.itemsize
    order = np.array([r.offset // per for r in manifest.records], dtype=np.intp)
    images = flat[order].reshape(n, c, c).astype(np.float32)
    return Dataset(manifest, images)


# ---------------------------------------------------------------------------
# augmentation and test-time crops


def center_origin(chip: int, crop: int) -> int:
    return (chip - crop) // 2


def crop_at(image: np.ndarray, origin: Tuple[int, int], crop: int) -> np.ndarray:
    r, c = origin
    if r < 0 or c < 0 or r + crop > image.shape[0] or c + crop > image.shape[1]:
        raise ShapeError(f"crop at {origin} of extent {crop} leaves the {image.shape} chip")
    return image[r:r + crop, c:c + crop]


def shift_after_crop(p_center, origin: Tuple[int, int], chip: int, crop: int):
    """Target position relative to the crop centre, (row, col) pixels."""
    if p_center is None:
        return None
    c0 = center_origin(chip, crop)
    return (p_center[0] - (origin[0] - c0), p_center[1] - (origin[1] - c0))


def crop_augment(sample: Sample, rng: np.random.Generator, crop: int = CROP):
    """Uniform random crop; returns (image, label, p_shift or None)."""
    chip = sample.image.shape[0]
    if crop >= chip:
        raise ShapeError(f"crop {crop} must be smaller than chip {chip}")
    origin = (int(rng.integers(0, chip - crop + 1)), int(rng.integers(0, chip - crop + 1)))
    return (crop_at(sample.image, origin, crop), sample.label,
            shift_after_crop(sample.p_center, origin, chip, crop))


def nine_crop_offsets(shift: int = SHIFT_PX) -> List[Tuple[int, int]]:
    return [(dr, dc) for dr in (-shift, 0, shift) for dc in (-shift, 0, shift)]


def nine_crops(image: np.ndarray, crop: int = CROP, shift: int = SHIFT_PX) -> np.ndarray:
    """3x3 grid of crops around the centre crop, row-major; index 4 is the centre."""
    chip = image.shape[0]
    if chip - crop < 2 * shift:
        raise ShapeError(f"chip {chip} minus crop {crop} leaves no room for +-{shift}px shifts")
    c0 = center_origin(chip, crop)
    return np.stack([crop_at(image, (c0 + dr, c0 + dc), crop) for dr, dc in nine_crop_offsets(shift)])


def augment_batch(dataset: Dataset, idx: Sequence[int], rng: np.random.Generator):
    """Random-crop a batch; returns images [N,1,crop,crop], labels, p_shift [N,2] (NaN rows for background)."""
    crop = dataset.crop
    imgs = np.empty((len(idx), 1, crop, crop), dtype=np.float32)
    labels = np.empty(len(idx), dtype=np.intp)
    shifts = np.full((len(idx), 2), np.nan, dtype=np.float32)
    for k, i in enumerate(idx):
        img, lab, ps = crop_augment(dataset.sample(int(i)), rng, crop)
        imgs[k, 0] = img
        labels[k] = lab
        if ps is not None:
            shifts[k] = ps
    return imgs, labels, shifts


def batch_sampler(labels: Sequence[int], rng: np.random.Generator, batch: int = 16) -> Iterator[np.ndarray]:
    """One epoch of balanced batches over ``labels`` (indices into them).

    Each batch holds batch/2 background and batch/2 target-class indices,
    drawn uniformly with replacement; an epoch has ceil(N / batch) batches.
    """
    labels = np.asarray(labels)
    bg = np.flatnonzero(labels == 0)
    tg = np.flatnonzero(labels != 0)
    if bg.size == 0 or tg.size == 0:
        raise DatasetError("batch sampler needs both background and target samples")
    if batch < 2 or batch % 2:
        raise DatasetError(f"batch size must be even and >= 2, got {batch}")
    half = batch // 2
    for _ in range(math.ceil(labels.size / batch)):
        yield np.concatenate([rng.choice(bg, half), rng.choice(tg, half)])
