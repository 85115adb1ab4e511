"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. Tensors are numbered
in creation order, so reverse creation order is a valid topological order
and :func:`backward` visits each node exactly once, deterministically.

Shapes are explicit: elementwise ops need equal shapes; the only implicit
broadcast is the row-wise bias in :func:`add_bias`.
"""
from __future__ import annotations

import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_DEBUG = os.environ.get("M2T2_AUTODIFF_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """In debug mode any non-finite op output raises FloatingPointError."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite output from {backward.__qualname__}")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += np.reshape(g, t.shape)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: _accum(a, g))
    a = as_tensor(a)
    _check_same(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return _make(a.data - b, (a,), lambda g: _accum(a, g))
    _check_same(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _make(a.data - b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b)) if np.ndim(b) == 0 else mul(a, Tensor(b))
    _check_same(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    y = a.data / b.data

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * y / b.data)
    return _make(y, (a, b), bw)


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of x [n x d] by s[i] (s has shape [n])."""
    if s.shape != (x.shape[0],):
        raise ValueError(f"mul_rows: {x.shape} with {s.shape}")

    def bw(g):
        _accum(x, g * s.data[:, None])
        _accum(s, np.sum(g * x.data, axis=1))
    return _make(x.data * s.data[:, None], (x, s), bw)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    return _make(y, (x,), lambda g: _accum(x, np.where(y > 0, g, 0.0)))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: _accum(x, g * y))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def sqrt(x: Tensor) -> Tensor:
    """Square root with zero gradient at 0 (keeps norms of zero vectors finite)."""
    y = np.sqrt(x.data)
    safe = y > 0

    def bw(g):
        _accum(x, np.where(safe, g * 0.5 / np.where(safe, y, 1.0), 0.0))
    return _make(y, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: _accum(x, g * inside))


# ---- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: _accum(a, g.T))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_bias: {x.shape} with {b.shape}")

    def bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))
    return _make(x.data + b.data, (x, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# ---- reductions and normalisation --------------------------------------------

def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(np.sum(x.data), (x,), lambda g: _accum(x, np.full(x.shape, g)))

    def bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))
    return _make(np.sum(x.data, axis=axis), (x,), bw)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, y * (g - np.sum(g * y, axis=-1, keepdims=True)))
    return _make(y, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layernorm: gain/bias must match the feature dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gain.data
        _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        _accum(gain, np.sum(g * xhat, axis=0))
        _accum(bias, np.sum(g, axis=0))
    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = np.sqrt(np.sum(x.data ** 2, axis=1, keepdims=True) + eps)
    y = x.data / n

    def bw(g):
        _accum(x, (g - y * np.sum(g * y, axis=1, keepdims=True)) / n)
    return _make(y, (x,), bw)


def cross_rows(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "cross_rows")

    def bw(g):
        _accum(a, np.cross(b.data, g))
        _accum(b, np.cross(g, a.data))
    return _make(np.cross(a.data, b.data), (a, b), bw)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    return reduce_sum(mul(a, b), axis=1)


# ---- attention ---------------------------------------------------------------

NEG_INF = -1e9


def attention_bias(mask) -> np.ndarray:
    """Additive bias for a boolean mask; all-false rows fall back to all-true."""
    mask = np.asarray(mask, dtype=bool).copy()
    mask[~mask.any(axis=1)] = True
    return np.where(mask, 0.0, NEG_INF)


def attention_weights(q, k, mask=None) -> np.ndarray:
    q, k = np.asarray(q), np.asarray(k)
    s = q @ k.T / np.sqrt(q.shape[1])
    if mask is not None:
        s = s + attention_bias(mask)
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v with bias 0 where mask is true, -1e9 elsewhere."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ValueError("masked_attention expects 2-D inputs")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(f"masked_attention: shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    if mask is not None and np.shape(mask) != (q.shape[0], k.shape[0]):
        raise ValueError("masked_attention: mask shape mismatch")
    scl = 1.0 / np.sqrt(q.shape[1])
    w = attention_weights(q.data, k.data, mask)

    def bw(g):
        dw = g @ v.data.T
        ds = w * (dw - np.sum(dw * w, axis=1, keepdims=True))
        _accum(q, ds @ k.data * scl)
        _accum(k, ds.T @ q.data * scl)
        _accum(v, w.T @ g)
    return _make(w @ v.data, (q, k, v), bw)


# ---- indexing / structure ----------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        _accum(x, full)
    return _make(x.data[:, start:stop], (x,), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        _accum(x, full)
    return _make(x.data[start:stop], (x,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        _accum(x, full)
    return _make(x.data[idx], (x,), bw)


def take(x: Tensor, rows, cols) -> Tensor:
    """Elements x[rows[i], cols[i]] as a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, (rows, cols), g)
        _accum(x, full)
    return _make(x.data[rows, cols], (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, np.reshape(g, x.shape)))


def group_max(x: Tensor, group_size: int) -> Tensor:
    """Max over consecutive row groups: [S*K, F] -> [S, F]; ties go to the first row."""
    n, f = x.shape
    if n % group_size:
        raise ValueError("group_max: rows not divisible by group size")
    xg = x.data.reshape(n // group_size, group_size, f)
    arg = np.argmax(xg, axis=1)
    y = np.take_along_axis(xg, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        full = np.zeros_like(xg)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        _accum(x, full.reshape(n, f))
    return _make(y, (x,), bw)


def segment_max(x: Tensor, counts) -> Tensor:
    """Max over consecutive row segments of the given lengths: [sum(counts), F] -> [S, F].

    Ties go to the first row of the segment holding the maximum.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != x.shape[0] or np.any(counts < 1):
        raise ValueError("segment_max: counts do not partition the rows")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    y = np.maximum.reduceat(x.data, starts, axis=0)

    def bw(g):
        eq = x.data == np.repeat(y, counts, axis=0)
        rows = np.where(eq, np.arange(x.shape[0])[:, None], x.shape[0])
        first = np.minimum.reduceat(rows, starts, axis=0)
        full = np.zeros(x.shape)
        full[first, np.arange(x.shape[1])[None, :]] = g
        _accum(x, full)
    return _make(y, (x,), bw)


# ---- backward ------------------------------------------------------------------

def _collect(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> list:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Intermediate gradients are released as soon as they are consumed.
    Returns the leaves in creation order.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return []
    nodes = _collect(loss)
    _accum(loss, np.ones_like(loss.data))
    leaves = []
    for node in nodes:
        if node._backward is None:
            leaves.append(node)
            continue
        g = node.grad
        node.grad = None
        if g is not None:
            node._backward(g)
    return sorted(leaves, key=lambda t: t._id)


def grad_check(f: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per entry is |a - n| / max(floor, |a| + |n|). With
    ``max_entries`` a random subset of entries of each input is checked.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    backward(f())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        gflat = ga.reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - num) / max(floor, abs(gflat[i]) + abs(num))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
