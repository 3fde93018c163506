"""Differentiable operations.

Every op computes its forward value with numpy (or a kernel from
:mod:`ticl._kernels`), checks it is finite, and records a gradient rule on
the active tape when any input requires gradients.
"""

from __future__ import annotations

import builtins

import numpy as np

from .. import _kernels
from .tensor import NonFiniteError, ShapeError, Tensor, _active_tape, as_tensor


def _emit(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and builtins.any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    k = _kernels.active
    x2 = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1] if x.ndim else 1))
    y = k.gelu_fwd(x2).reshape(x.shape)
    return _emit("gelu", y, (x,),
                 lambda g: (k.gelu_bwd(np.ascontiguousarray(g.reshape(x2.shape)), x2).reshape(x.shape),))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], copy=True)

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", data, tensors, backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit("broadcast_to", np.array(np.broadcast_to(x.data, shape)), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


# -- reductions -------------------------------------------------------------

def _expand_like(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)
    return _emit("sum", out, (x,), lambda g: (_expand_like(g, x.shape, axis, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)
    count = x.data.size // max(out.size, 1)
    return _emit("mean", out, (x,), lambda g: (_expand_like(g / count, x.shape, axis, keepdims).astype(x.dtype),))


# -- normalisation ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    k = _kernels.active
    moved = np.moveaxis(x.data, axis, -1)
    mshape = moved.shape
    y2 = k.softmax_fwd(np.ascontiguousarray(moved.reshape(-1, mshape[-1])))
    y = np.moveaxis(y2.reshape(mshape), -1, axis)

    def backward(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(y2.shape))
        return (np.moveaxis(k.softmax_bwd(g2, y2).reshape(mshape), -1, axis),)

    return _emit("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},), got {gamma.shape}, {beta.shape}")
    k = _kernels.active
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = k.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def backward(g):
        dx, dg, db = k.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dg, db

    return _emit("layer_norm", y.reshape(x.shape), (x, gamma, beta), backward)


# -- losses -----------------------------------------------------------------

class LabelError(ValueError):
    pass


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch-mean cross entropy against hard labels or soft distributions."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    b, k = logits.shape
    targets = np.asarray(targets)
    if targets.dtype.kind in "iu":
        if targets.shape != (b,):
            raise ShapeError(f"expected {b} labels, got shape {targets.shape}")
        if targets.size and (targets.min() < 0 or targets.max() >= k):
            raise LabelError(f"labels must lie in [0, {k})")
        dist = np.zeros((b, k), dtype=np.float64)
        dist[np.arange(b), targets] = 1.0
    else:
        if targets.shape != (b, k):
            raise ShapeError(f"soft targets must have shape {(b, k)}, got {targets.shape}")
        dist = targets.astype(np.float64)
        if np.any(dist < 0) or not np.allclose(dist.sum(axis=1), 1.0, atol=1e-5):
            raise LabelError("soft targets must be distributions over classes")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = np.asarray(-(dist * logp).sum() / b, dtype=logits.dtype)

    def backward(g):
        return (((np.exp(logp) - dist) * (np.float64(g) / b)).astype(logits.dtype),)

    return _emit("cross_entropy", loss, (logits,), backward)


def feature_distance(u: Tensor, v: Tensor, squared: bool = False) -> Tensor:
    """Batch mean of ``||u_b - v_b||_2`` (or its square); zero-distance rows get zero gradient."""
    if u.shape != v.shape:
        raise ShapeError(f"feature_distance shapes differ: {u.shape} vs {v.shape}")
    diff = u.data.astype(np.float64) - v.data.astype(np.float64)
    diff2 = diff.reshape(-1, diff.shape[-1]) if diff.ndim else diff.reshape(1, 1)
    rows = diff2.shape[0]
    sq = (diff2 * diff2).sum(axis=1)
    if squared:
        loss = sq.sum() / rows
        coef = np.full(rows, 2.0)
    else:
        norm = np.sqrt(sq)
        loss = norm.sum() / rows
        coef = np.divide(1.0, norm, out=np.zeros_like(norm), where=norm > 0)

    def backward(g):
        gu = (diff2 * (coef * np.float64(g) / rows)[:, None]).reshape(u.shape)
        return gu.astype(u.dtype), (-gu).astype(v.dtype)

    return _emit("feature_distance", np.asarray(loss, dtype=u.dtype), (u, v), backward)
