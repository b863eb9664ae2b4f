"""Differentiable operators.

Every operator returns a new :class:`Tensor` and, when any input requires
grad, records a closure mapping the output gradient to input gradients.
Broadcasting is limited to a right operand whose shape equals the trailing
axes of the left operand (a leading-batch broadcast); anything else must go
through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _trailing(a_shape, b_shape) -> bool:
    nb = len(b_shape)
    return nb <= len(a_shape) and tuple(a_shape[len(a_shape) - nb:]) == tuple(b_shape)


def _reduce_leading(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- arithmetic ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return Tensor._make(a.data + a.dtype.type(c), (a,), lambda g: (g,))
    b = _lift(b, a)
    if a.shape == b.shape:
        return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))
    if _trailing(a.shape, b.shape):
        bs = b.shape
        return Tensor._make(a.data + b.data, (a, b), lambda g: (g, _reduce_leading(g, bs)))
    if _trailing(b.shape, a.shape):
        return add(b, a)
    raise ShapeError("add", a.shape, b.shape)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, scale(b, -1.0))
    return add(a, -np.asarray(b))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    b = _lift(b, a)
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if _trailing(a.shape, b.shape):
        ad, bd, bs = a.data, b.data, b.shape
        return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, _reduce_leading(g * ad, bs)))
    if _trailing(b.shape, a.shape):
        return mul(b, a)
    raise ShapeError("mul", a.shape, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight ``(n, p)`` shared across every leading axis
    of ``a`` or a stack with exactly ``a``'s leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if b.ndim == 2:
        n, p = bd.shape
        a2 = ad.reshape(-1, n)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (p,))

        def backward(g):
            g2 = g.reshape(-1, p)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._make(out, (a, b), backward)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def add_mask(x: Tensor, bias: np.ndarray) -> Tensor:
    """Add a constant (non-learnable) bias such as an attention mask.

    ``bias`` must match the trailing axes of ``x``.
    """
    bias = np.asarray(bias, dtype=x.dtype)
    if not _trailing(x.shape, bias.shape):
        raise ShapeError("add_mask", x.shape, bias.shape)
    return Tensor._make(x.data + bias, (x,), lambda g: (g,))


# -- pointwise -------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.exp(-np.logaddexp(0, -d)).astype(x.dtype)
    return Tensor._make(y, (x,), lambda g: (g * y * (1 - y),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    inner = _GELU_C * (d + _GELU_A * d ** 3)
    t = np.tanh(inner)
    y = 0.5 * d * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * _GELU_A * d * d)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner),)

    return Tensor._make(y.astype(x.dtype), (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.log(d), (x,), lambda g: (g / d,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(d * d, (x,), lambda g: (2 * g * d,))


# -- normalisation / softmax --------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Layer normalisation over the last axis with learnable scale/offset."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd, bd = gamma.data, beta.data
    y = xhat * gd + bd

    def backward(g):
        gx = gxhat = None
        if x.requires_grad:
            gxhat = g * gd
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor._make(y.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return Tensor._make(y, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    src = x.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return Tensor._make(np.ascontiguousarray(y), (x,), backward)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis."""
    y = x.data[index]
    if isinstance(y, np.ndarray) and y.size == 0:
        raise ShapeError("slice", x.shape, y.shape)
    src, dt = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src, dtype=dt)
        out[index] += g
        return (out,)

    return Tensor._make(np.array(y, copy=True), (x,), backward)


def gather(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    y = np.take(x.data, indices, axis=axis)
    src, dt = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src, dtype=dt)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (out,)

    return Tensor._make(y, (x,), backward)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Cyclic shift along spatial axes; exact inverse is ``roll`` by ``-shifts``."""
    shifts, axes = tuple(shifts), tuple(axes)
    neg = tuple(-s for s in shifts)
    return Tensor._make(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, neg, axes),))


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    if len(widths) != x.ndim:
        raise ShapeError("pad", x.shape, widths)
    y = np.pad(x.data, widths)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return Tensor._make(y, (x,), lambda g: (g[sl],))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError("concat", xs[0].shape, t.shape)
    y = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return Tensor._make(y, xs, backward)


def unfold(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """im2col for channels-last images ``(B, H, W, C)``.

    Returns ``(B, Ho, Wo, kernel*kernel*C)`` ordered (ki, kj, c).
    """
    if x.ndim != 4:
        raise ShapeError("unfold", x.shape)
    B, H, W, C = x.shape
    p, s, k = padding, stride, kernel
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("unfold", x.shape, (k, s, p))
    cols = [xp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] for i in range(k) for j in range(k)]
    y = np.stack(cols, axis=3).reshape(B, Ho, Wo, k * k * C)

    def backward(g):
        g = g.reshape(B, Ho, Wo, k * k, C)
        gp = np.zeros(xp.shape, dtype=x.dtype)
        idx = 0
        for i in range(k):
            for j in range(k):
                gp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += g[:, :, :, idx, :]
                idx += 1
        return (gp[:, p:p + H, p:p + W, :],)

    return Tensor._make(y, (x,), backward)


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept), src).astype(x.dtype, copy=True),)

    return Tensor._make(np.asarray(y, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes), 1.0 / n)
