"""Dense tensors with a reverse-mode gradient tape.

Every operation returns a new :class:`Tensor`. When gradient recording is
enabled and any operand requires a gradient, the result remembers its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks that DAG once in reverse topological order.

Broadcasting is deliberately narrow: elementwise operands must have equal
shapes, or one of them must be a scalar (a Python number or a 0-d tensor).
Anything else has to go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import AxisError, DomainError, GraphError, ShapeError

__all__ = [
    "Tensor",
    "apply_op",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "elementwise",
    "matmul",
    "conv2d",
    "depthwise_conv2d",
    "pool_max",
    "reduce",
    "pad",
    "broadcast_to",
    "concat",
    "upsample_nearest",
    "finite_diff_check",
    "numerical_gradient",
]

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


Scalar = Union[int, float, np.floating, np.integer]
Operand = Union["Tensor", Scalar]


class Tensor:
    """An n-dimensional real array that can participate in the gradient tape.

    Args:
        data: anything ``np.asarray`` accepts. Integer and boolean inputs are
            promoted to float32; float32 and wider floats keep their precision
            (extended precision is used by the finite-difference oracle).
        requires_grad: whether ``backward`` should accumulate into ``grad``.
        dtype: optional explicit floating dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "meta")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = data.data if isinstance(data, Tensor) else np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" and arr.dtype.itemsize >= 4 else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.meta: dict = {}

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        """Copy into a fresh leaf of another precision (not differentiable)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``.

        Only scalar tensors can seed the backward pass unless an explicit
        ``grad`` of matching shape is passed. Calling twice without clearing
        gradients accumulates, like every mainstream framework.
        """
        if grad is None:
            if self.size != 1:
                raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=self.dtype)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return elementwise("add", _lift(other, self), self)

    def __sub__(self, other: Operand) -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return elementwise("sub", _lift(other, self), self)

    def __mul__(self, other: Operand) -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return elementwise("mul", _lift(other, self), self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return elementwise("div", self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return elementwise("div", _lift(other, self), self)

    def __pow__(self, other: Operand) -> "Tensor":
        return elementwise("pow", self, other)

    def __neg__(self) -> "Tensor":
        return apply_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return _getitem(self, index)

    # -- unary math -------------------------------------------------------
    def exp(self) -> "Tensor":
        return elementwise("exp", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def abs(self) -> "Tensor":
        return elementwise("abs", self)

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise DomainError("sqrt of a negative value")
        out = np.sqrt(self.data)

        def backward(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0)
            return (g * d,)

        return apply_op(out, (self,), backward, "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return apply_op(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def clip(self, lo: Optional[float] = None, hi: Optional[float] = None) -> "Tensor":
        """Clamp values; gradient passes only where the input was inside the range."""
        out = np.clip(self.data, lo, hi)
        inside = np.ones(self.shape, dtype=bool)
        if lo is not None:
            inside &= self.data >= lo
        if hi is not None:
            inside &= self.data <= hi
        return apply_op(out, (self,), lambda g: (g * inside,), "clip")

    def maximum(self, other: Operand) -> "Tensor":
        return elementwise("max", self, other)

    def minimum(self, other: Operand) -> "Tensor":
        return elementwise("min", self, other)

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def min(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("min", self, axis, keepdims)

    def std(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("stdev", self, axis, keepdims)

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        out = self.data.reshape(shape)
        return apply_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def flatten(self, start: int = 1) -> "Tensor":
        return self.reshape(self.shape[:start] + (-1,))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return apply_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def broadcast_to(self, shape) -> "Tensor":
        return broadcast_to(self, shape)


def _raise_nonscalar(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x: Operand, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim != 0:
        raise ShapeError(f"only scalars may be mixed with tensors implicitly, got shape {arr.shape}")
    return Tensor(arr.astype(like.dtype))


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str, **meta) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent. Recording is skipped when no parent needs a
    gradient or when inside :func:`no_grad`.
    """
    out = Tensor(data, dtype=parents[0].dtype if parents else None)
    out.op = op
    out.meta = meta
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise


_UNARY = {"exp", "log", "abs"}
_BINARY = {"add", "sub", "mul", "div", "pow", "max", "min"}


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def elementwise(kind: str, a: Operand, b: Optional[Operand] = None) -> Tensor:
    """Apply an elementwise operation.

    ``kind`` is one of add, sub, mul, div, pow, max, min (binary) or exp,
    log, abs (unary). Binary operands must share a shape unless one of them
    is a scalar.
    """
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _unary(kind, a if isinstance(a, Tensor) else Tensor(a))
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if not isinstance(a, Tensor):
        a = _lift(a, b) if isinstance(b, Tensor) else Tensor(a)
    b = _lift(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    x, y = a.data, b.data

    if kind == "add":
        out = x + y
        fn = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    elif kind == "sub":
        out = x - y
        fn = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))
    elif kind == "mul":
        out = x * y
        fn = lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    elif kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y
        defined = np.broadcast_to(y != 0, out.shape)

        def fn(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                gx = np.where(defined, g / y, 0)
                gy = np.where(defined, -g * x / (y * y), 0)
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    elif kind == "pow":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(x, y)

        def fn(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                gx = g * y * np.power(x, y - 1)
                gy = None
                if b.requires_grad:
                    logx = np.where(x > 0, np.log(np.where(x > 0, x, 1)), 0)
                    gy = _unbroadcast(g * out * logx, y.shape)
            gx = np.where(np.isfinite(gx), gx, 0)
            return _unbroadcast(gx, x.shape), gy

    elif kind == "max":
        out = np.maximum(x, y)
        pick = np.broadcast_to(x >= y, out.shape)
        fn = lambda g: (_unbroadcast(g * pick, x.shape), _unbroadcast(g * ~pick, y.shape))
    else:  # min
        out = np.minimum(x, y)
        pick = np.broadcast_to(x <= y, out.shape)
        fn = lambda g: (_unbroadcast(g * pick, x.shape), _unbroadcast(g * ~pick, y.shape))
    return apply_op(out, (a, b), fn, kind)


def _unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "exp":
        out = np.exp(x)
        fn = lambda g: (g * out,)
    elif kind == "log":
        if np.any(x <= 0):
            raise DomainError("log of a non-positive value")
        out = np.log(x)
        fn = lambda g: (g / x,)
    else:
        out = np.abs(x)
        fn = lambda g: (g * np.sign(x),)
    return apply_op(out, (a,), fn, kind)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is either a
    plain matrix shared across the batch or carries the same batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = x @ y

    def fn(g):
        ga = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if y.ndim == 2 and x.ndim > 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return apply_op(out, (a, b), fn, "matmul")


def _same_pads(k: int) -> Tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kh,kw]``.

    ``padding`` is ``"same"`` (zero padding keeping H, W at stride 1) or
    ``"valid"``. Implemented as im2col followed by one matrix product.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")

    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    rows = lambda i: slice(i, i + stride * (ho - 1) + 1, stride)
    cols_ = lambda j: slice(j, j + stride * (wo - 1) + 1, stride)
    # Two column layouts. Channels-first keeps whole image rows contiguous
    # and wins on large, thin maps; channels-last wins when C is large.
    if ho * wo > 32 * c:
        out, fn = _conv_cf(x, kernel, bias, (pt, pb, pl, pr), taps, rows, cols_, ho, wo)
    else:
        out, fn = _conv_cl(x, kernel, bias, (pt, pb, pl, pr), taps, rows, cols_, ho, wo)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return apply_op(out, parents, fn, "conv2d", stride=stride)



def _conv_cf(x, kernel, bias, pads, taps, rows, cols_, ho, wo):
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    pt, pb, pl, pr = pads
    xd = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if any(pads) else x.data
    cols = np.empty((n, len(taps), c, ho, wo), dtype=xd.dtype)
    for k, (i, j) in enumerate(taps):
        cols[:, k] = xd[:, :, rows(i), cols_(j)]
    cols = cols.reshape(n, len(taps) * c, ho * wo)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, len(taps) * c)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, f, ho, wo)

    def fn(g):
        g3 = g.reshape(n, f, ho * wo)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0)
            gk = gk.reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = (wmat.T @ g3).reshape(n, len(taps), c, ho, wo)
            gxp = np.zeros(xd.shape, dtype=g.dtype)
            for k, (i, j) in enumerate(taps):
                gxp[:, :, rows(i), cols_(j)] += dcols[:, k]
            gx = gxp[:, :, pt:pt + h, pl:pl + w]
        return gx, gk, gb

    return out, fn


def _conv_cl(x, kernel, bias, pads, taps, rows, cols_, ho, wo):
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    pt, pb, pl, pr = pads
    xd = x.data.transpose(0, 2, 3, 1)
    if any(pads):
        xd = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    slices = [xd[:, rows(i), cols_(j), :] for i, j in taps]
    cols = slices[0] if len(slices) == 1 else np.concatenate(slices, axis=-1)
    cols = np.ascontiguousarray(cols).reshape(n * ho * wo, len(taps) * c)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(len(taps) * c, f)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, len(taps), c)
            gxp = np.zeros(xd.shape, dtype=g.dtype)
            for k, (i, j) in enumerate(taps):
                gxp[:, rows(i), cols_(j), :] += dcols[:, :, :, k, :]
            gx = gxp[:, pt:pt + h, pl:pl + w, :].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return out, fn


def depthwise_conv2d(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Valid cross-correlation of every channel with one fixed 2-D kernel.

    The kernel is a constant (no gradient); used for fixed smoothing filters.
    """
    kernel = np.asarray(kernel, dtype=x.dtype)
    kh, kw = kernel.shape
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kernel.shape} larger than input {x.shape}")
    xd = x.data
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0:
                out += kernel[i, j] * xd[:, :, i:i + ho, j:j + wo]

    def fn(g):
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                if kernel[i, j] != 0:
                    gx[:, :, i:i + ho, j:j + wo] += kernel[i, j] * g
        return (gx,)

    return apply_op(out, (x,), fn, "depthwise_conv2d", stride=1)


def pool_max(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over ``window``x``window`` valid windows taken every ``stride`` pixels."""
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {x.shape}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    xd = x.data
    out = None
    idx = np.zeros((n, c, ho, wo), dtype=np.int8)
    # running max over shifted views; strict '>' keeps the first maximum
    for k in range(window * window):
        i, j = divmod(k, window)
        view = xd[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
        if out is None:
            out = view.copy()
            continue
        better = view > out
        np.copyto(out, view, where=better)
        idx[better] = k

    def fn(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = idx == i * window + j
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (gx,)

    return apply_op(out, (x,), fn, "pool_max", stride=stride, window=window)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} is out of range for a {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axis`` with sum, mean, min, max or stdev (population)."""
    if kind not in ("sum", "mean", "min", "max", "stdev"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = _normalize_axes(axis, t.ndim)
    x = t.data
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    if kind == "sum":
        out_k = x.sum(axis=axes, keepdims=True)
        fn_k = lambda gk: np.broadcast_to(gk, x.shape)
    elif kind == "mean":
        out_k = x.mean(axis=axes, keepdims=True)
        fn_k = lambda gk: np.broadcast_to(gk / count, x.shape)
    elif kind in ("max", "min"):
        out_k = x.max(axis=axes, keepdims=True) if kind == "max" else x.min(axis=axes, keepdims=True)
        hits = x == out_k
        ties = hits.sum(axis=axes, keepdims=True)
        fn_k = lambda gk: hits * (gk / ties)
    else:
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        out_k = np.sqrt((centered * centered).mean(axis=axes, keepdims=True))

        def fn_k(gk):
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(out_k > 0, gk / (count * np.where(out_k > 0, out_k, 1)), 0)
            return centered * scale

    out = out_k if keepdims else out_k.reshape([s for i, s in enumerate(x.shape) if i not in axes])
    return apply_op(out, (t,), lambda g: (np.ascontiguousarray(fn_k(g.reshape(kept_shape))),), kind)


# ---------------------------------------------------------------------------
# structural ops


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _getitem(t: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = t.data[index]
    basic = _is_basic_index(index)
    items = index if isinstance(index, tuple) else (index,)
    step = max([abs(i.step) for i in items if isinstance(i, slice) and i.step] or [1])

    def fn(g):
        gx = np.zeros_like(t.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return apply_op(np.array(out, copy=True), (t,), fn, "getitem", stride=step)


_PAD_MODES = {"zeros": "constant", "symmetric": "symmetric", "reflect": "reflect", "edge": "edge"}


def pad(t: Tensor, widths: Sequence[Tuple[int, int]], mode: str = "zeros") -> Tensor:
    """Pad every axis by ``widths[axis] = (before, after)``.

    ``mode`` is zeros, symmetric (edge sample repeated), reflect (edge
    sample not repeated) or edge (replicate).
    """
    if mode not in _PAD_MODES:
        raise ValueError(f"unknown pad mode {mode!r}")
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != t.ndim:
        raise ShapeError(f"pad widths for {len(widths)} axes given to a {t.ndim}-d tensor")
    np_mode = _PAD_MODES[mode]
    out = np.pad(t.data, widths, mode=np_mode)

    def fn(g):
        gx = g
        for axis, (lo, hi) in enumerate(widths):
            if lo == 0 and hi == 0:
                continue
            n = t.shape[axis]
            core = np.take(gx, np.arange(lo, lo + n), axis=axis)
            if np_mode != "constant":
                src = np.pad(np.arange(n), (lo, hi), mode=np_mode)
                core = np.moveaxis(core, axis, 0).copy()
                moved = np.moveaxis(gx, axis, 0)
                for k in list(range(lo)) + list(range(lo + n, lo + n + hi)):
                    core[src[k]] += moved[k]
                core = np.moveaxis(core, 0, axis)
            gx = core
        return (np.ascontiguousarray(gx),)

    return apply_op(out, (t,), fn, "pad")


def broadcast_to(t: Tensor, shape) -> Tensor:
    """Explicitly broadcast ``t`` to ``shape`` (numpy rules)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {t.shape} to {shape}") from None
    lead = len(shape) - t.ndim
    src = t.shape

    def fn(g):
        gx = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and gx.shape[i] != 1)
        if axes:
            gx = gx.sum(axis=axes, keepdims=True)
        return (gx.reshape(src),)

    return apply_op(np.ascontiguousarray(out), (t,), fn, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = _normalize_axes(axis, ndim)[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, tensors, fn, "concat")


def upsample_nearest(t: Tensor, factor: int = 2) -> Tensor:
    """Replicate each pixel of ``t[N,C,H,W]`` into a ``factor``x``factor`` block."""
    n, c, h, w = t.shape
    out = t.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return apply_op(out, (t,), fn, "upsample")


# ---------------------------------------------------------------------------
# gradient verification


def numerical_gradient(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x)
    if base.dtype.kind != "f":
        base = base.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    base = np.array(x.data if isinstance(x, Tensor) else x)
    xt = Tensor(base.copy(), requires_grad=True, dtype=base.dtype if base.dtype.kind == "f" else np.float64)
    out = f(xt)
    if out.size != 1:
        raise GraphError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    out.backward()
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """``|a - n| / (|a| + |n| + floor)``; the floor sets the magnitude below
    which a gradient counts as zero."""
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + floor)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6, floor: float = 1e-12) -> float:
    """Max over coordinates of ``|analytic - central| / (|analytic| + |central| + floor)``.

    Run it on float64 inputs; float32 leaves too little headroom.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    analytic = analytic_gradient(f, x)
    numeric = numerical_gradient(f, x, eps)
    return float(relative_error(analytic, numeric, floor).max()) if analytic.size else 0.0
