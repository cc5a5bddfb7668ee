"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op that touches a tensor with ``requires_grad`` emits a
:class:`Record` carrying a monotonically increasing index. Inputs are always
created before outputs, so sorting reachable records by descending index is a
valid reverse topological order and one sweep in :func:`backward` is enough.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericalError, UsageError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_counter = itertools.count()


class Record:
    """One operation in the differentiation graph."""

    __slots__ = ("index", "kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.index = next(_counter)
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Graph:
    """Counts (and optionally retains) the records created while it is active.

    Use as a context manager to scope recording::

        with Graph(retain=True) as g:
            loss = f(x)
        assert g.records[-1].kind == "mean"
    """

    def __init__(self, retain: bool = False):
        self.retain = retain
        self.records: list[Record] = []
        self.n_records = 0

    def add(self, rec: Record) -> None:
        self.n_records += 1
        if self.retain:
            self.records.append(rec)

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.pop()


_graph_stack: list[Graph] = [Graph()]
_grad_enabled = [True]


def current_graph() -> Graph:
    return _graph_stack[-1]


def is_grad_enabled() -> bool:
    return _grad_enabled[-1]


@contextlib.contextmanager
def no_grad():
    """Run a block without recording any graph records."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            dtype = data.dtype
        else:
            dtype = np.float64
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_record", "name", "__weakref__")

    __array_priority__ = 100  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._record: Optional[Record] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res.name = None
    res._record = None
    res.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        rec = Record(kind, inputs, backward_fn)
        current_graph().add(rec)
        res._record = rec
        res.requires_grad = True
    return res


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    records: dict[int, Record] = {}
    stack = [loss._record]
    while stack:
        rec = stack.pop()
        if rec.index in records:
            continue
        records[rec.index] = rec
        for t in rec.inputs:
            if t._record is not None and t._record.index not in records:
                stack.append(t._record)

    grads: dict[int, np.ndarray] = {loss._record.index: np.ones_like(loss.data)}
    for idx in sorted(records, reverse=True):
        rec = records[idx]
        g = grads.pop(idx, None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._record is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                k = t._record.index
                grads[k] = gi if k not in grads else grads[k] + gi


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _make("gelu", out.astype(x.dtype, copy=False), (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make("transpose", out, (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", out, (x,), bw)


def matmul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        else:
            gb = None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def _check_indices(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ConfigError("row indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ConfigError(f"row index out of range for {n} rows")
    return idx.astype(np.intp, copy=False)


def _row_selector(idx: np.ndarray):
    if idx.ndim == 1:
        return (idx,)
    return (np.arange(idx.shape[0])[:, None], idx)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows. 1-D ``idx`` indexes axis 0; 2-D ``idx`` (batch, m) indexes axis 1 per batch entry."""
    idx = np.asarray(idx)
    axis = idx.ndim - 1
    if idx.ndim not in (1, 2) or (idx.ndim == 2 and idx.shape[0] != x.shape[0]):
        raise ConfigError(f"bad index shape {idx.shape} for tensor {x.shape}")
    idx = _check_indices(idx, x.shape[axis])
    sel = _row_selector(idx)
    out = x.data[sel]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, sel, g)
        return (gx,)

    return _make("gather_rows", out, (x,), bw)


def scatter_rows(src: Tensor, idx, template: Tensor) -> Tensor:
    """Copy of ``template`` with rows ``idx`` replaced by ``src``. Indices must be unique."""
    idx = np.asarray(idx)
    axis = idx.ndim - 1
    if idx.ndim not in (1, 2):
        raise ConfigError(f"bad index shape {idx.shape}")
    idx = _check_indices(idx, template.shape[axis])
    srt = np.sort(idx, axis=-1)
    if srt.shape[-1] > 1 and (np.diff(srt, axis=-1) == 0).any():
        raise ConfigError("scatter_rows indices must be unique")
    sel = _row_selector(idx)
    if template.data[sel].shape != src.shape:
        raise ConfigError(f"scatter source {src.shape} does not fit template rows {template.data[sel].shape}")
    out = template.data.copy()
    out[sel] = src.data

    def bw(g):
        gs = g[sel] if src.requires_grad else None
        gt = None
        if template.requires_grad:
            gt = g.copy()
            gt[sel] = 0
        return gs, gt

    return _make("scatter_rows", out, (src, template), bw)


# ---------------------------------------------------------------- nn kernels


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericalError("softmax received NaN input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ConfigError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
    xhat = np.where(var + eps == 0, 0.0, xhat).astype(x.dtype, copy=False)
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make("layer_norm", out, (x, gamma, beta), bw)


def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def conv_output_size(size: int, k: int, stride: int, padding) -> int:
    lo, hi = _pad_pair(padding)
    span = size + lo + hi - k
    if span < 0:
        raise ConfigError(f"kernel {k} larger than padded extent {size + lo + hi}")
    if span % stride:
        raise ConfigError(f"extent {size} with kernel {k}, padding {padding} is not divisible by stride {stride}")
    return span // stride + 1


def _conv_prepare(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise ConfigError("only square kernels are supported")
    if x.shape[1] != cin:
        raise ConfigError(f"conv2d channel mismatch: input {x.shape[1]}, weight {cin}")
    if x.dtype != w.dtype:
        raise ConfigError(f"conv2d dtype mismatch: input {x.dtype}, weight {w.dtype}")
    if b is not None and b.shape != (cout,):
        raise ConfigError(f"conv2d bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise ConfigError("stride must be positive")
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kh, stride, padding)
    lo, hi = _pad_pair(padding)
    xp = x.data
    if lo or hi:
        xp = np.pad(xp, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    return xp, ho, wo, kh, lo


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    B, C = xp.shape[:2]
    if stride == k and xp.shape[2] == ho * k and xp.shape[3] == wo * k:
        cols = xp.reshape(B, C, ho, k, wo, k).transpose(0, 2, 4, 1, 3, 5)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride].transpose(0, 2, 3, 1, 4, 5)
    return cols.reshape(B * ho * wo, C * k * k)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding=0, method: str = "im2col") -> Tensor:
    """2-D cross-correlation, ``B x Cin x H x W`` -> ``B x Cout x H' x W'``.

    ``padding`` is either one int or a ``(before, after)`` pair applied to both
    spatial axes. ``(H + before + after - k)`` must be divisible by ``stride``;
    there is no silent truncation.

    ``method="direct"`` accumulates one kernel tap at a time instead of
    building the column matrix. Both give the same result to rounding.
    """
    xp, ho, wo, k, lo = _conv_prepare(x, w, b, stride, padding)
    B = x.shape[0]
    cout = w.shape[0]
    wmat = w.data.reshape(cout, -1)
    if method == "im2col":
        cols = _im2col(xp, k, stride, ho, wo)
        out = cols @ wmat.T
        out = out.reshape(B, ho, wo, cout).transpose(0, 3, 1, 2)
    elif method == "direct":
        cols = None
        out = np.zeros((B, cout, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
                out += np.einsum("bchw,oc->bohw", patch, w.data[:, :, i, j])
    else:
        raise ConfigError(f"unknown conv method {method!r}")
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        G = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        c = cols if cols is not None else _im2col(xp, k, stride, ho, wo)
        gw = (G.T @ c).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (G @ wmat).reshape(B, ho, wo, x.shape[1], k, k)
            if stride == k and lo == 0 and xp.shape[2] == ho * k and xp.shape[3] == wo * k:
                gxp = gc.transpose(0, 3, 1, 4, 2, 5).reshape(xp.shape)
            else:
                gxp = np.zeros_like(xp)
                gct = gc.transpose(0, 3, 4, 5, 1, 2)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gct[:, :, i, j]
            gx = gxp[:, :, lo : lo + x.shape[2], lo : lo + x.shape[3]]
            gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        gb = G.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make("conv2d", out, inputs, bw)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """2x2 / stride-2 max pooling; ties resolve to the first maximum in row-major order."""
    if k != 2 or stride != 2:
        raise ConfigError("only 2x2 pooling with stride 2 is supported")
    if x.ndim != 4:
        raise ConfigError(f"maxpool2d expects a 4-D map, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ConfigError(f"maxpool2d needs even extents, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _make("maxpool2d", np.ascontiguousarray(out), (x,), bw)
