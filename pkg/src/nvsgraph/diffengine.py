"""Reverse-mode differentiation over dense float64 numpy arrays.

Every primitive returns a new :class:`DiffArray`; when any operand requires a
gradient the result remembers its operands and a closure that maps the output
gradient to operand gradients. :func:`backward` replays those closures in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class DiffArray:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffArray":
        return DiffArray(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)
    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)
    def relu(self): return relu(self)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _node(data: np.ndarray, parents: Sequence[DiffArray], backward: Callable, op: str) -> DiffArray:
    out = DiffArray(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _toposort(root: DiffArray) -> list[DiffArray]:
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
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


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable array that requires it."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any array that requires grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# --- elementwise ------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> DiffArray:
    a = as_diff(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> DiffArray:
    a = as_diff(a)
    e = float(exponent)
    return _node(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1),), "pow")


def exp(a) -> DiffArray:
    a = as_diff(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DiffArray:
    a = as_diff(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> DiffArray:
    a = as_diff(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> DiffArray:
    """``a @ b`` for 2-D or batched operands (numpy semantics, no 1-D operands)."""
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), back, "matmul")


def spmm(matrix, x) -> DiffArray:
    """Constant sparse (scipy) matrix times a dense 2-D array."""
    x = as_diff(x)
    if matrix.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch {matrix.shape} @ {x.shape}")
    return _node(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(matrix.T @ g),), "spmm")


# --- shape ---------------------------------------------------------------------

def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> DiffArray:
    a = as_diff(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    sizes = [x.shape[axis] for x in arrays]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in arrays], axis=axis), arrays,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    return _node(np.stack([x.data for x in arrays], axis=axis), arrays,
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def getitem(a, index) -> DiffArray:
    a = as_diff(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), back, "slice")


slice_ = getitem


def pad(a, pad_width) -> DiffArray:
    """Zero padding; ``pad_width`` follows :func:`numpy.pad`."""
    a = as_diff(a)
    pw = np.broadcast_to(np.asarray(pad_width, dtype=np.int64), (a.ndim, 2))
    if (pw < 0).any():
        raise ValueError("pad widths must be non-negative")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return _node(np.pad(a.data, pw), (a,), lambda g: (g[index],), "pad")


# --- reductions --------------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return int(np.prod([shape[ax] for ax in axes]))


def reduce_sum(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    n = _count(a.shape, axis)
    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims) / n,), "mean")


def reduce_var(a, axis=None, keepdims: bool = False) -> DiffArray:
    """Population variance (divides by the element count)."""
    a = as_diff(a)
    n = _count(a.shape, axis)
    centred = a.data - a.data.mean(axis=axis, keepdims=True)
    return _node((centred ** 2).mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims) * (2.0 / n) * centred,), "var")


# --- indexing along the leading axis ------------------------------------------------

def _check_index(index: np.ndarray, n: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"index out of bounds for axis of length {n}")
    return index


def _row_add(out_rows: int, index: np.ndarray, src: np.ndarray) -> np.ndarray:
    """Sum rows of ``src`` into ``out_rows`` slots by ``index`` (bincount keeps order fixed)."""
    tail = src.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    flat = (index[:, None] * width + np.arange(width)).ravel()
    out = np.bincount(flat, weights=src.reshape(-1), minlength=out_rows * width)
    return out.reshape((out_rows,) + tail)


def gather(a, index) -> DiffArray:
    """Rows ``a[index]``."""
    a = as_diff(a)
    index = _check_index(index, a.shape[0])
    return _node(a.data[index], (a,), lambda g: (_row_add(a.shape[0], index, g),), "gather")


def index_add(base, index, src) -> DiffArray:
    """``base`` with ``src[k]`` added to row ``index[k]`` for every k (duplicates accumulate)."""
    base, src = as_diff(base), as_diff(src)
    index = _check_index(index, base.shape[0])
    if src.shape[0] != len(index) or src.shape[1:] != base.shape[1:]:
        raise ValueError(f"index_add shape mismatch: base {base.shape}, src {src.shape}, index {index.shape}")
    out = base.data + _row_add(base.shape[0], index, src.data)
    return _node(out, (base, src), lambda g: (g, g[index]), "index_add")


def scatter_max(src, index, num_segments: int) -> DiffArray:
    """Per-column maximum of the rows of ``src`` sharing a segment id.

    Empty segments yield 0. The gradient of each output entry flows to the
    single source row attaining the maximum, the lowest row index on ties.
    """
    src = as_diff(src)
    index = _check_index(index, num_segments)
    if src.ndim != 2 or src.shape[0] != len(index):
        raise ValueError(f"scatter_max expects (rows, channels) src matching index, got {src.shape}")
    n, c = src.shape
    out = np.zeros((num_segments, c))
    if n == 0:
        return _node(out, (src,), lambda g: (np.zeros((0, c)),), "scatter_max")
    order = np.argsort(index, kind="stable")
    seg_sorted = index[order]
    vals = src.data[order]
    starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
    counts = np.diff(np.r_[starts, n])
    segs = seg_sorted[starts]
    best = np.maximum.reduceat(vals, starts, axis=0)
    hit = vals == np.repeat(best, counts, axis=0)
    pos = np.where(hit, np.arange(n)[:, None], n)
    arg = order[np.minimum(np.minimum.reduceat(pos, starts, axis=0), n - 1)]
    out[segs] = best
    cols = np.broadcast_to(np.arange(c), arg.shape)

    def back(g):
        gs = np.zeros((n, c))
        gs[arg, cols] = g[segs]
        return (gs,)

    node = _node(out, (src,), back, "scatter_max")
    node.argmax = (segs, arg)
    return node


# --- volumetric helpers --------------------------------------------------------------

def unfold3d(a, kernel: tuple[int, int, int] = (3, 3, 3)) -> DiffArray:
    """Patches of a (B, H, W, T, C) array: (B, H-kh+1, W-kw+1, T-kt+1, kh*kw*kt*C).

    The last axis is ordered (dh, dw, dt, channel).
    """
    a = as_diff(a)
    kh, kw, kt = kernel
    b, h, w, t, c = a.shape
    ho, wo, to = h - kh + 1, w - kw + 1, t - kt + 1
    if min(ho, wo, to) < 1:
        raise ValueError(f"input {a.shape} smaller than kernel {kernel}")
    win = sliding_window_view(a.data, (kh, kw, kt), axis=(1, 2, 3))  # B,ho,wo,to,C,kh,kw,kt
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(b, ho, wo, to, kh * kw * kt * c)

    def back(g):
        g = g.reshape(b, ho, wo, to, kh, kw, kt, c)
        full = np.zeros(a.shape)
        for dh in range(kh):
            for dw in range(kw):
                for dt in range(kt):
                    full[:, dh:dh + ho, dw:dw + wo, dt:dt + to, :] += g[:, :, :, :, dh, dw, dt, :]
        return (full,)

    return _node(cols, (a,), back, "unfold3d")


def max_pool3d(a, window=(2, 2, 2), stride=(2, 2, 2)) -> DiffArray:
    """Max over (H, W, T) windows of a (B, H, W, T, C) array, floor output size.

    Gradients go to the first maximal element of each window.
    """
    a = as_diff(a)
    b, h, w, t, c = a.shape
    if h < window[0] or w < window[1] or t < window[2]:
        raise ValueError(f"input dims {(h, w, t)} smaller than pooling window {tuple(window)}")
    win = sliding_window_view(a.data, tuple(window), axis=(1, 2, 3))
    win = win[:, :: stride[0], :: stride[1], :: stride[2]]
    _, ho, wo, to = win.shape[:4]
    flat = win.reshape(b, ho, wo, to, c, -1)
    k = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]

    def back(g):
        dh, rem = np.divmod(k, window[1] * window[2])
        dw, dt = np.divmod(rem, window[2])
        bi, oh, ow, ot, ci = np.indices(k.shape, sparse=True)
        src = (((bi * h + oh * stride[0] + dh) * w + ow * stride[1] + dw) * t + ot * stride[2] + dt) * c + ci
        full = np.bincount(src.ravel(), weights=g.ravel(), minlength=a.size)
        return (full.reshape(a.shape),)

    return _node(out, (a,), back, "max_pool3d")


# --- finite-difference checking ---------------------------------------------------

def numerical_grad(fn: Callable[..., DiffArray], inputs: Sequence[np.ndarray], wrt: int, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` with respect to ``inputs[wrt]``."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    x = base[wrt]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    with no_grad():
        for _ in it:
            i = it.multi_index
            orig = x[i]
            x[i] = orig + eps
            hi = fn(*[DiffArray(v) for v in base]).item()
            x[i] = orig - eps
            lo = fn(*[DiffArray(v) for v in base]).item()
            x[i] = orig
            grad[i] = (hi - lo) / (2 * eps)
    return grad


def gradcheck(fn: Callable[..., DiffArray], inputs: Sequence[np.ndarray], eps: float = 1e-5,
              atol: float = 1e-8) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The error for each input is ``|analytic - numeric| / max(|analytic|, |numeric|)``
    measured in the Euclidean norm over that input. Inputs whose gradients are
    both below ``atol`` in norm (an exactly vanishing gradient against
    finite-difference noise) count as agreeing.
    """
    arrays = [DiffArray(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*arrays)
    backward(out)
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = np.zeros_like(arr.data) if arr.grad is None else arr.grad
        numeric = numerical_grad(fn, [a.data for a in arrays], k, eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale < atol:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
