"""The four-part network: enhancement U-Net, convolutional feature extractor,
classification head and target-shift regression head.

A model is described by an ordered list of :class:`~spdrdl.layers.LayerSpec`
(see :func:`build_layers`). The same table drives parameter creation, the
forward pass and the symbolic shape walk, so they cannot drift apart.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import kvconfig
from . import layers as L
from . import tensor as T
from .errors import ConfigError, CorruptFileError, ShapeError, VersionError
from .layers import LayerSpec
from .tensor import Tensor

GROUPS = ("enhance", "fe", "c", "reg")
LOC_MIN_WIDTH = 8

# The shift head's dense outputs are multiplied by this constant, so a unit
# output means a full crop shift. RMSProp moves each weight by about lr per
# step; without the factor the head needs thousands of steps just to reach
# pixel-sized outputs.
SHIFT_SCALE_PX = 16.0

CHECKPOINT_MAGIC = b"SPDRDLCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    unet_depth: int = 3
    unet_width: int = 16
    backbone_widths: Tuple[int, ...] = (32, 64, 128)
    num_classes: int = 4
    aa: bool = True
    coordconv: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.unet_depth < 1 or self.unet_width < 1 or not self.backbone_widths:
            raise ConfigError("unet depth/width and backbone widths must be positive")
        if self.input_size % (2 ** self.unet_depth):
            raise ConfigError(
                f"input extent {self.input_size} not divisible by 2^{self.unet_depth}")
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full_size(cls, **overrides) -> "ModelConfig":
        """Full-size topology: 256x256 input, 4-level U-Net, 1024-channel
        feature map at 8x8 (the size a DenseNet-121 trunk would deliver)."""
        base = dict(input_size=256, unet_depth=4, unet_width=16,
                    backbone_widths=(64, 128, 256, 512, 1024))
        base.update(overrides)
        return cls(**base)

    @property
    def loc_widths(self) -> Tuple[int, int, int]:
        # 256/128/64 against a 1024-channel trunk, kept proportional but
        # never below LOC_MIN_WIDTH: two- or four-channel relu layers die
        # within a few optimiser steps and freeze the shift head
        out = self.backbone_widths[-1]
        return tuple(max(LOC_MIN_WIDTH, out // k) for k in (4, 8, 16))

    def to_text(self) -> str:
        return kvconfig.dumps(kvconfig.to_mapping(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return kvconfig.from_mapping(cls, kvconfig.loads(text))


def build_layers(config: ModelConfig) -> List[LayerSpec]:
    """Layer table in execution order."""
    d, base = config.unet_depth, config.unet_width
    pool_kind = "aa-maxpool" if config.aa else "maxpool"
    out: List[LayerSpec] = [LayerSpec("input1", "input")]

    def conv(name, src, filters, kernel=3, relu=True, group="enhance"):
        out.append(LayerSpec(name, "conv", (src,), filters=filters, kernel=kernel, relu=relu, group=group))
        return name

    prev = "input1"
    for i in range(1, d + 1):
        width = base * 2 ** (i - 1)
        prev = conv(f"conv{i}a", prev, width)
        prev = conv(f"conv{i}b", prev, width)
        out.append(LayerSpec(f"pool{i}", pool_kind, (prev,), pool=2, stride=2, aa=config.aa,
                             group="enhance"))
        prev = f"pool{i}"
    prev = conv(f"conv{d + 1}a", prev, base * 2 ** d)
    prev = conv(f"conv{d + 1}b", prev, base * 2 ** d)
    for k in range(1, d + 1):
        level, idx = d + 1 - k, d + 1 + k
        width = base * 2 ** (level - 1)
        out.append(LayerSpec(f"up{k}", "upsample", (prev,), pool=2, group="enhance"))
        a = conv(f"conv{idx}a", f"up{k}", width)
        out.append(LayerSpec(f"merge{k}", "concat", (a, f"conv{level}b"), group="enhance"))
        prev = conv(f"conv{idx}b", f"merge{k}", width)
        prev = conv(f"conv{idx}c", prev, width)
    last = 2 * d + 1
    prev = conv(f"conv{last}d", prev, 2)
    prev = conv(f"conv{last}e", prev, 1, kernel=1, relu=False)
    out.append(LayerSpec("lambda1", "minmax-norm", (prev,)))
    prev = "lambda1"

    if config.coordconv:
        out.append(LayerSpec("coord1", "coordconv", (prev,)))
        prev = "coord1"
    n_blocks = len(config.backbone_widths)
    for b, width in enumerate(config.backbone_widths, 1):
        prev = conv(f"fe{b}a", prev, width, group="fe")
        prev = conv(f"fe{b}b", prev, width, group="fe")
        name = "densenet1" if b == n_blocks else f"fe_pool{b}"
        out.append(LayerSpec(name, pool_kind, (prev,), pool=2, stride=2, aa=config.aa))
        prev = name

    out.append(LayerSpec("gap1", "global-avg-pool", ("densenet1",)))
    out.append(LayerSpec("classification", "dense", ("gap1",), filters=config.num_classes, group="c"))
    out.append(LayerSpec("probabilities", "softmax", ("classification",)))

    w10, w11, w12 = config.loc_widths
    conv("conv10", "densenet1", w10, kernel=1, group="reg")
    conv("conv11", "conv10", w11, kernel=1, group="reg")
    conv("conv12", "conv11", w12, kernel=1, group="reg")
    out.append(LayerSpec("flatten1", "flatten", ("conv12",), group="reg"))
    out.append(LayerSpec("xPosEstimate", "dense", ("flatten1",), filters=1, group="reg"))
    out.append(LayerSpec("yPosEstimate", "dense", ("flatten1",), filters=1, group="reg"))
    return out


def shape_walk(config: ModelConfig, layers: Optional[List[LayerSpec]] = None) -> "OrderedDict[str, Tuple[int, ...]]":
    """Per-layer output shape without a batch axis: (C, H, W) or (features,)."""
    layers = layers or build_layers(config)
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for spec in layers:
        src = [shapes[i] for i in spec.inputs]
        k = spec.kind
        if k == "input":
            s = (1, config.input_size, config.input_size)
        elif k == "conv":
            s = (spec.filters,) + src[0][1:]
        elif k in ("aa-maxpool", "maxpool"):
            c, h, w = src[0]
            s = (c, -(-h // spec.pool), -(-w // spec.pool))
        elif k == "upsample":
            c, h, w = src[0]
            s = (c, h * spec.pool, w * spec.pool)
        elif k == "concat":
            if any(x[1:] != src[0][1:] for x in src):
                raise ShapeError(f"{spec.name}: cannot concatenate {src}")
            s = (sum(x[0] for x in src),) + src[0][1:]
        elif k == "coordconv":
            s = (src[0][0] + 2,) + src[0][1:]
        elif k in ("minmax-norm", "softmax"):
            s = src[0]
        elif k == "global-avg-pool":
            s = (src[0][0],)
        elif k == "flatten":
            s = (int(np.prod(src[0])),)
        elif k == "dense":
            s = (spec.filters,)
        else:  # pragma: no cover - guarded by LayerSpec
            raise ValueError(k)
        shapes[spec.name] = s
    return shapes


@dataclass
class ModelParams:
    """Ordered learnable tensors plus the config and seed that produced them."""

    config: ModelConfig
    seed: int
    tensors: "OrderedDict[str, Tensor]"
    groups: Dict[str, str]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    def group(self, name: str) -> str:
        return self.groups[name]

    def in_group(self, group: str) -> List[str]:
        return [n for n in self.tensors if self.groups[n] == group]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self, dtype=None, requires_grad: bool = True) -> "ModelParams":
        tensors = OrderedDict(
            (n, Tensor(t.data.astype(dtype or t.dtype, copy=True), requires_grad=requires_grad))
            for n, t in self.tensors.items())
        return ModelParams(self.config, self.seed, tensors, dict(self.groups))

    def with_config(self, **changes) -> "ModelParams":
        """Same tensors under a modified config (e.g. anti-aliasing toggled)."""
        return ModelParams(replace(self.config, **changes), self.seed, self.tensors, self.groups)


def build(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Create He-initialised parameters for ``config`` (zero biases; the
    final shift-regression weights start at zero)."""
    layers = build_layers(config)
    shapes = shape_walk(config, layers)
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    groups: Dict[str, str] = {}
    for spec in layers:
        if spec.kind == "conv":
            cin = shapes[spec.inputs[0]][0]
            k = spec.kernel
            w = L.he_normal(rng, (spec.filters, cin, k, k), cin * k * k)
            b = np.zeros(spec.filters, dtype=np.float32)
        elif spec.kind == "dense":
            fan_in = shapes[spec.inputs[0]][0]
            w = L.he_normal(rng, (fan_in, spec.filters), fan_in)
            if spec.group == "reg":
                # start the shift regressor at p_hat = 0: random outputs only
                # add error, and the quickest way to shed it is to kill every
                # relu feeding the head
                w = np.zeros_like(w)
            b = np.zeros(spec.filters, dtype=np.float32)
        else:
            continue
        for suffix, arr in (("weight", w), ("bias", b)):
            name = f"{spec.name}.{suffix}"
            tensors[name] = Tensor(arr, requires_grad=True)
            groups[name] = spec.group
    return ModelParams(config, int(seed), tensors, groups)


def _to_batch(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        t = images
    else:
        t = Tensor(np.asarray(images, dtype=dtype))
    if t.ndim == 3:
        t = t.reshape(t.shape[0], 1, t.shape[1], t.shape[2])
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"expected grayscale batch [N,1,H,W], got {t.shape}")
    return t


def forward(params: ModelParams, images, enhance: bool = True, heads: Tuple[str, ...] = ("c", "reg"),
            keep: bool = False) -> Dict[str, Tensor]:
    """Run the network on a batch of [0, 1] images.

    Returns ``x_enhanced``, ``probabilities`` (rows on the simplex) and
    ``p_hat`` (``[N, 2]`` predicted shift as row, column in input pixels).

    With ``enhance=False`` the U-Net is bypassed and ``x_enhanced`` is just
    the min-max normalised input (used with fixed despeckling filters).
    ``heads=("c",)`` skips the localisation head, which also lifts the
    fixed-extent requirement. ``keep=True`` adds every activation under
    its layer name.
    """
    cfg = params.config
    x = _to_batch(images, next(iter(params.tensors.values())).dtype)
    if "reg" in heads and (x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size):
        raise ShapeError(f"model expects {cfg.input_size}x{cfg.input_size} input, got {x.shape[2]}x{x.shape[3]}")
    d = 2 ** cfg.unet_depth
    if x.shape[2] % d or x.shape[3] % d:
        raise ShapeError(f"input extent {x.shape[2:]} not divisible by {d}")

    acts: Dict[str, Tensor] = {}
    p = params.tensors
    for spec in build_layers(cfg):
        if spec.group == "reg" and "reg" not in heads:
            continue
        if spec.group == "enhance" and not enhance:
            continue
        k = spec.kind
        # the bypassed U-Net leaves lambda1 without its producer
        src = [acts[i] for i in spec.inputs if i in acts]
        if k == "input":
            y = x
        elif k == "conv":
            y = L.conv(src[0], p[f"{spec.name}.weight"], p[f"{spec.name}.bias"], relu=spec.relu)
        elif k == "aa-maxpool":
            y = L.aa_maxpool(src[0], spec.pool)
        elif k == "maxpool":
            y = L.max_pool(src[0], spec.pool)
        elif k == "upsample":
            y = L.upsample_nearest(src[0], spec.pool)
        elif k == "concat":
            y = L.concat(src)
        elif k == "minmax-norm":
            y = L.minmax_normalize(src[0] if enhance else x)
        elif k == "coordconv":
            y = L.coordconv_augment(src[0])
        elif k == "global-avg-pool":
            y = L.global_avg_pool(src[0])
        elif k == "dense":
            y = L.dense(src[0], p[f"{spec.name}.weight"], p[f"{spec.name}.bias"])
        elif k == "softmax":
            y = L.softmax(src[0])
        elif k == "flatten":
            y = src[0].flatten(1)
        else:  # pragma: no cover
            raise ValueError(k)
        acts[spec.name] = y

    out = {"x_enhanced": acts["lambda1"], "probabilities": acts["probabilities"]}
    if "reg" in heads:
        out["p_hat"] = T.concat([acts["yPosEstimate"], acts["xPosEstimate"]], axis=1) * SHIFT_SCALE_PX
    if keep:
        out.update(acts)
    return out


def strided_ops_without_blur(root: Tensor) -> List[Tensor]:
    """Walk the recorded tape behind ``root`` and return every strided node
    whose input does not come straight from a blur (depthwise filter)."""
    bad, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.meta.get("stride", 1) > 1:
            if not node.parents or node.parents[0].op != "depthwise_conv2d":
                bad.append(node)
        stack.extend(node.parents)
    return bad


# ---------------------------------------------------------------------------
# checkpoint I/O


def _pack_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def to_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _pack_str(buf, params.config.to_text())
    buf.write(struct.pack("<Q", params.seed))
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        _pack_str(buf, name)
        _pack_str(buf, params.groups[name])
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptFileError("checkpoint is truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError("checkpoint string is not valid UTF-8") from None


def from_bytes(raw: bytes) -> ModelParams:
    r = _Reader(raw)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptFileError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        config = ModelConfig.from_text(r.string())
    except ConfigError as exc:
        raise CorruptFileError(f"bad config block: {exc}") from None
    (seed,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    groups: Dict[str, str] = {}
    for _ in range(count):
        name = r.string()
        group = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True)
        groups[name] = group
    if r.pos != len(raw):
        raise CorruptFileError("trailing bytes after the last parameter record")
    expected = build(config, seed)
    if [(n, t.shape) for n, t in expected.items()] != [(n, t.shape) for n, t in tensors.items()]:
        raise CorruptFileError("parameter records do not match the stored config")
    return ModelParams(config, int(seed), tensors, groups)


def save(params: ModelParams, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load(path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())
