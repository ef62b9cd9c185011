"""Differentiable operations.

Each op computes its forward value with numpy (the per-element hot kernels
go through `tgpt.numerics.backend`), and registers a closure that maps the
output gradient to per-parent gradients.  Closures return None for parents
that do not require grad, so frozen weights never get gradient buffers.
"""

import math
from contextlib import contextmanager

import numpy as np

from tgpt.numerics import backend
from tgpt.numerics.tensor import Tensor, grad_enabled


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


# Names listed here get their backward closure deliberately broken (scaled
# by 2).  Only gradient-check tests use this, as a negative control.
_CORRUPTED: set = set()


@contextmanager
def corrupt_backward(kernel: str):
    _CORRUPTED.add(kernel)
    try:
        yield
    finally:
        _CORRUPTED.discard(kernel)


def _node(data, parents, kernel, backward):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        if kernel in _CORRUPTED:
            out._backward = lambda g, _f=backward: _f(g * 2.0)
        else:
            out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} received non-finite input")


def _rows(arr):
    """View (..., C) as a C-contiguous (R, C) matrix."""
    mat = arr.reshape(-1, arr.shape[-1])
    return np.ascontiguousarray(mat)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = -_unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), "mul", backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.data.dtype)

    def backward(g):
        return (g * np.asarray(s, dtype=g.dtype),) if a.requires_grad else (None,)

    return _node(data, (a,), "scale", backward)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _node(data, (a, b), "matmul", backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),) if a.requires_grad else (None,)

    return _node(data, (a,), "transpose", backward)


def transpose_last2(a) -> Tensor:
    a = _as_tensor(a)
    order = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, order)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),) if a.requires_grad else (None,)

    return _node(data, (a,), "reshape", backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                grads.append(g[tuple(index)])
            else:
                grads.append(None)
        return tuple(grads)

    return _node(data, tuple(tensors), "concat", backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(data, (a,), "sum", backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.shape[ax] for ax in axes)
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "softmax")
    flat = _rows(a.data)
    y = backend.kernels.softmax_fwd(flat)
    data = y.reshape(a.shape)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        dx = backend.kernels.softmax_bwd(np.ascontiguousarray(g.reshape(y.shape)), y)
        return (dx.reshape(a.shape),)

    return _node(data, (a,), "softmax", backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    cols = x.shape[-1]
    if gamma.shape != (cols,) or beta.shape != (cols,):
        raise ShapeError(
            f"layer_norm scale/shift must be ({cols},), got {gamma.shape} and {beta.shape}"
        )
    flat = _rows(x.data)
    y, mean, rstd = backend.kernels.layer_norm_fwd(flat, gamma.data, beta.data, eps)
    data = y.reshape(x.shape)

    def backward(g):
        dy = np.ascontiguousarray(g.reshape(flat.shape))
        dx, dgamma, dbeta = backend.kernels.layer_norm_bwd(
            dy, flat, gamma.data, mean, rstd
        )
        return (
            dx.reshape(x.shape) if x.requires_grad else None,
            dgamma if gamma.requires_grad else None,
            dbeta if beta.requires_grad else None,
        )

    return _node(data, (x, gamma, beta), "layer_norm", backward)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    flat = np.ascontiguousarray(a.data.reshape(-1))
    data = backend.kernels.gelu_fwd(flat).reshape(a.shape)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        dx = backend.kernels.gelu_bwd(np.ascontiguousarray(g.reshape(-1)), flat)
        return (dx.reshape(a.shape),)

    return _node(data, (a,), "gelu", backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),) if a.requires_grad else (None,)

    return _node(data, (a,), "relu", backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: table (V, d), integer ids (...,) -> (..., d)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range for table with {table.shape[0]} rows"
        )
    data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return (None,)
        dw = np.zeros_like(table.data)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dw,)

    return _node(data, (table,), "embedding", backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of bounds for axis {axis} "
            f"of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        if not a.requires_grad:
            return (None,)
        da = np.zeros_like(a.data)
        da[index] = g
        return (da,)

    return _node(data, (a,), "narrow", backward)


def select_positions(x, idx) -> Tensor:
    """Gather one row per batch item: x (B, L, d), idx (B,) -> (B, d)."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    batch = np.arange(x.shape[0])
    data = x.data[batch, idx]

    def backward(g):
        if not x.requires_grad:
            return (None,)
        dx = np.zeros_like(x.data)
        dx[batch, idx] = g
        return (dx,)

    return _node(data, (x,), "select_positions", backward)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    a = _as_tensor(a)
    flat = _rows(a.data)
    y, inv = backend.kernels.l2norm_fwd(flat, eps)
    data = y.reshape(a.shape)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        dx = backend.kernels.l2norm_bwd(np.ascontiguousarray(g.reshape(y.shape)), y, inv)
        return (dx.reshape(a.shape),)

    return _node(data, (a,), "l2_normalize", backward)


def cross_entropy_logits(logits, targets, mask=None) -> Tensor:
    """Mean cross entropy from raw logits.

    logits (..., C), integer targets (...); with a {0,1} mask the mean runs
    over unmasked positions only, and an all-zero mask yields loss 0 with a
    zero gradient rather than a division by zero.
    """
    logits = _as_tensor(logits)
    _check_finite(logits.data, "cross_entropy")
    flat = _rows(logits.data)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(
            f"cross_entropy targets {np.asarray(targets).shape} do not match "
            f"logits {logits.shape}"
        )
    if tgt.size and (tgt.min() < 0 or tgt.max() >= flat.shape[1]):
        raise ShapeError(f"cross_entropy targets out of range for {flat.shape[1]} classes")
    tgt = np.ascontiguousarray(tgt.astype(np.int64))
    nll, probs = backend.kernels.cross_entropy_fwd(flat, tgt)
    if mask is None:
        weights = np.full(flat.shape[0], 1.0 / flat.shape[0], dtype=flat.dtype)
        value = nll.mean()
    else:
        m = np.asarray(mask).reshape(-1).astype(flat.dtype)
        total = m.sum()
        if total > 0:
            weights = m / total
            value = float((nll * weights).sum())
        else:
            weights = np.zeros_like(m)
            value = 0.0
    data = np.asarray(value, dtype=flat.dtype)

    def backward(g):
        if not logits.requires_grad:
            return (None,)
        rowscale = np.ascontiguousarray(weights * g.reshape(()).astype(flat.dtype))
        dlogits = backend.kernels.cross_entropy_bwd(probs, tgt, rowscale)
        return (dlogits.reshape(logits.shape),)

    return _node(data, (logits,), "cross_entropy", backward)


def attention(q, k, v, n_heads: int, key_mask=None) -> Tensor:
    """Multi-head scaled dot-product attention built from the primitives
    above, so its backward pass needs no code of its own.

    q (B, Lq, d); k and v (B, Lk, d); key_mask (B, Lk) with 1 for real
    positions.  Masked keys get -1e9 added to their scores, which after the
    row softmax leaves exactly zero weight on them in float32.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    bsz, lq, dim = q.shape
    lk = k.shape[1]
    if dim % n_heads != 0:
        raise ShapeError(f"model width {dim} not divisible by {n_heads} heads")
    if k.shape != (bsz, lk, dim) or v.shape != (bsz, lk, dim):
        raise ShapeError(f"attention got q {q.shape}, k {k.shape}, v {v.shape}")
    dh = dim // n_heads

    def split(t, length):
        return transpose(reshape(t, (bsz, length, n_heads, dh)), (0, 2, 1, 3))

    qh = split(q, lq)
    kh = split(k, lk)
    vh = split(v, lk)
    scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        m = np.asarray(key_mask).reshape(bsz, 1, 1, lk)
        bias = (1.0 - m.astype(scores.dtype)) * np.asarray(-1e9, dtype=scores.dtype)
        scores = add(scores, Tensor(bias))
    probs = softmax(scores)
    ctx = matmul(probs, vh)
    return reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, lq, dim))


def _scalar_binary(op):
    def method(self, other):
        return op(self, other)

    return method


Tensor.__add__ = _scalar_binary(add)
Tensor.__radd__ = _scalar_binary(lambda a, b: add(b, a))
Tensor.__sub__ = _scalar_binary(sub)
Tensor.__rsub__ = _scalar_binary(lambda a, b: sub(b, a))
Tensor.__mul__ = _scalar_binary(mul)
Tensor.__rmul__ = _scalar_binary(lambda a, b: mul(b, a))
Tensor.__neg__ = neg
Tensor.__matmul__ = _scalar_binary(matmul)
