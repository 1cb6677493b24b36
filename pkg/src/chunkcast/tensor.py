"""Dense tensors with reverse-mode automatic differentiation.

numpy supplies the raw array math; this module adds an explicit recording
tape, gradient accumulation, and the small set of differentiable operations
the sequence policy needs. Shape handling is deliberately strict: apart from
adding a trailing bias vector and scalar operands, operand shapes must match
exactly and reshapes must be spelled out.

Gradients are recorded only while a `Tape` is active, so inference runs
without bookkeeping. A tape and the tensors recorded on it belong to a single
worker; parallelism happens across independent tapes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "Rng",
    "ShapeError",
    "NonFiniteError",
    "precision",
    "default_dtype",
    "debug_finite",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "clip",
    "exp",
    "log",
    "gelu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "tsum",
    "tmean",
    "layernorm",
    "linear",
    "embedding_lookup",
    "gather_last",
    "gather_2d",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "masked_fill",
    "repeat_leading",
    "conv2d",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(RuntimeError):
    """A forward op produced NaN/Inf while finite checks were enabled."""


_DEFAULT_DTYPE = np.float32
_DEBUG_FINITE = False


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created leaf tensors.

    Training runs in float32; oracle tests switch to float64 where tight
    tolerances are asserted.
    """
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def debug_finite(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every forward op."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out, parents, grad_fn):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Append-only record of executed ops.

    Recording order is a topological order by construction, so the backward
    sweep is a single reverse iteration that touches each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def clear(self) -> None:
        self.nodes.clear()


_TAPES: list[Tape] = []


class Tensor:
    """A dense n-d float array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _fresh(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: Tape | None = None) -> None:
        backward(self, tape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; scalars are plain python numbers, never silently
    # promoted arrays.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("tensor division only supports scalar divisors")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _fresh(data: np.ndarray) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("forward op produced a non-finite value")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    return t


def _record(out: Tensor, parents: tuple, grad_fn: Callable) -> Tensor:
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].nodes.append(_Node(out, parents, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate gradients of a scalar loss into every `requires_grad` leaf.

    Repeated calls without zeroing accumulate. Must run while the tape the
    loss was recorded on is available (the innermost active tape by default).
    Gradients of intermediate results live only for the duration of the
    sweep; leaves keep theirs in `.grad`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        if not _TAPES:
            raise RuntimeError("backward called with no active tape")
        tape = _TAPES[-1]
    interm = {id(node.out) for node in tape.nodes}
    seed = np.ones_like(loss.data)
    if id(loss) not in interm:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    scratch: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        out_grad = scratch.pop(id(node.out), None)
        if out_grad is None:
            continue
        grads = node.grad_fn(out_grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise ShapeError(
                    f"internal: gradient shape {g.shape} != value shape {parent.data.shape}"
                )
            key = id(parent)
            if key in interm:
                scratch[key] = g if key not in scratch else scratch[key] + g
            else:
                parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic splittable random stream on a counter-based generator.

    Every sampling site in the package draws from one of these; splitting
    yields independent child streams so that adding a consumer never shifts
    the draws seen by another.
    """

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(child) for child in self._seq.spawn(n)]

    def normal(self, shape=(), std: float = 1.0, dtype=None) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=np.float64) * std
        return out.astype(dtype or _DEFAULT_DTYPE)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape, dtype=np.float64)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def categorical(self, probs: np.ndarray) -> int:
        """Draw one index from a probability vector (cumulative inversion)."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self._gen.random() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _sum_to_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b) -> Tensor:
    """Elementwise add. Accepts equal shapes, a trailing bias vector, or a scalar."""
    if isinstance(b, (int, float)):
        out = _fresh(a.data + b)
        return _record(out, (a,), lambda g: (g,))
    if a.data.shape == b.data.shape:
        out = _fresh(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        out = _fresh(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, _sum_to_bias(g)))
    if a.data.ndim == 1 and b.data.ndim >= 1 and b.data.shape[-1] == a.data.shape[0]:
        out = _fresh(a.data + b.data)
        return _record(out, (a, b), lambda g: (_sum_to_bias(g), g))
    raise ShapeError(f"add needs equal shapes or a trailing bias: {a.shape} + {b.data.shape}")


def neg(a: Tensor) -> Tensor:
    out = _fresh(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub needs equal shapes: {a.shape} - {b.data.shape}")
    out = _fresh(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise multiply by an equal-shape tensor or a scalar."""
    if isinstance(b, (int, float)):
        out = _fresh(a.data * b)
        return _record(out, (a,), lambda g: (g * b,))
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul needs equal shapes: {a.shape} * {b.data.shape}")
    ad, bd = a.data, b.data
    out = _fresh(ad * bd)
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only inside the interval."""
    od = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    out = _fresh(od)
    return _record(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def exp(a: Tensor) -> Tensor:
    od = np.exp(a.data)
    out = _fresh(od)
    return _record(out, (a,), lambda g: (g * od,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = _fresh(np.log(ad))
    return _record(out, (a,), lambda g: (g / ad,))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad / _SQRT2))
    out = _fresh(ad * cdf)

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return _record(out, (a,), grad_fn)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    axis = _normalize_axis(axis, a.data.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    od = e / e.sum(axis=axis, keepdims=True)
    out = _fresh(od)

    def grad_fn(g):
        inner = (g * od).sum(axis=axis, keepdims=True)
        return (od * (g - inner),)

    return _record(out, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(axis, a.data.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    od = shifted - lse
    out = _fresh(od)

    def grad_fn(g):
        return (g - np.exp(od) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), grad_fn)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, a.data.ndim)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    od = m + np.log(s)
    soft = e / s
    if not keepdims:
        od = od.squeeze(axis=axis)
    out = _fresh(od)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (soft * gk,)

    return _record(out, (a,), grad_fn)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).astype(g.dtype, copy=True) if g.shape != shape else g
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _normalize_axis(axis, a.data.ndim)
    od = a.data.sum(axis=axis, keepdims=keepdims)
    out = _fresh(od)
    shape = a.data.shape
    return _record(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _normalize_axis(axis, a.data.ndim)
    od = a.data.mean(axis=axis, keepdims=keepdims)
    out = _fresh(od)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]
    inv = 1.0 / count
    return _record(out, (a,), lambda g: (_expand_reduced(g * inv, shape, axis, keepdims),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes.

    Either both operands share identical leading dims, or `b` is a plain 2-d
    weight matrix applied across all of `a`'s leading dims. No other
    broadcasting.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands: {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} x {bd.shape}")
    shared_batch = bd.ndim > 2
    if shared_batch and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul leading dims disagree: {ad.shape} x {bd.shape}")
    out = _fresh(ad @ bd)

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if shared_batch or ad.ndim == 2:
            gb = np.swapaxes(ad, -1, -2) @ g
        else:
            k, n = ad.shape[-1], g.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _record(out, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight is (d_in, d_out). A bare (d_in,) vector is
    treated as a single row."""
    squeeze = x.data.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.data.shape[0]))
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (out.data.shape[-1],)) if squeeze else out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _fresh(xhat * gain.data + bias.data)

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# indexing, gathering, shaping
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Pick rows of a (V, d) table; backward scatters into the table gradient."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v}): {ids.min()}..{ids.max()}")
    out = _fresh(table.data[ids])

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), grad_fn)


def gather_last(x: Tensor, ids) -> Tensor:
    """Pick one element per row along the last axis: out[...] = x[..., ids[...]]."""
    ids = np.asarray(ids)
    if ids.shape != x.data.shape[:-1]:
        raise ShapeError(f"gather ids shape {ids.shape} != leading shape {x.data.shape[:-1]}")
    v = x.data.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"gather id out of range [0, {v})")
    od = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]
    out = _fresh(od)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        flat = gx.reshape(-1, v)
        np.add.at(flat, (np.arange(flat.shape[0]), ids.reshape(-1)), g.reshape(-1))
        return (gx,)

    return _record(out, (x,), grad_fn)


def gather_2d(featmap: Tensor, coords) -> Tensor:
    """Point-wise feature vectors at integer (row, col) grid coordinates.

    featmap is (C, H, W); coords is one (row, col) pair or a sequence of
    them. Returns (C,) for a single pair, (n, C) otherwise.
    """
    c, h, w = featmap.data.shape
    arr = np.asarray(coords)
    single = arr.ndim == 1
    pairs = arr.reshape(-1, 2)
    if not np.issubdtype(pairs.dtype, np.integer):
        raise ShapeError("gather_2d coordinates must be integral")
    rows, cols = pairs[:, 0], pairs[:, 1]
    if pairs.size and (
        rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w
    ):
        raise IndexError(f"gather_2d coordinate outside {h}x{w} grid")
    flat = transpose(reshape(featmap, (c, h * w)), (1, 0))  # (H*W, C)
    out = embedding_lookup(flat, rows * w + cols)
    return reshape(out, (c,)) if single else out


def reshape(x: Tensor, shape) -> Tensor:
    od = x.data.reshape(shape)
    src = x.data.shape
    out = _fresh(od)
    return _record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    od = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    out = _fresh(od)
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    axis = _normalize_axis(axis, parts[0].data.ndim)
    od = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = _fresh(od)

    def grad_fn(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _record(out, tuple(parts), grad_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    axis = _normalize_axis(axis, x.data.ndim)
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}, {start + length}) exceeds axis {axis} of shape {x.shape}"
        )
    slicer = [slice(None)] * x.data.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)
    out = _fresh(x.data[slicer])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[slicer] = g
        return (gx,)

    return _record(out, (x,), grad_fn)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with a constant."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ShapeError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    out = _fresh(np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data))
    return _record(out, (x,), lambda g: (np.where(mask, 0.0, g),))


def repeat_leading(x: Tensor, n: int) -> Tensor:
    """Stack n copies along a new leading axis; backward sums them."""
    od = np.broadcast_to(x.data, (n,) + x.data.shape).copy()
    out = _fresh(od)
    return _record(out, (x,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NCHW layout, square stride/padding."""
    b, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channels disagree: input {c}, weight {cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    w2 = weight.data.reshape(f, -1)
    od = cols @ w2.T
    if bias is not None:
        od = od + bias.data
    od = od.transpose(0, 2, 1).reshape(b, f, ho, wo)
    out = _fresh(od)

    def grad_fn(g):
        g2 = g.reshape(b, f, ho * wo).transpose(0, 2, 1)  # (B, Ho*Wo, F)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2.reshape(-1, f).T @ cols.reshape(-1, c * kh * kw)).reshape(weight.data.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.reshape(-1, f).sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, grad_fn)
