"""Differentiable ops over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to a tuple of parent gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericDomainError, ShapeError
from .tensor import Tensor, as_tensor

COS_EPS = 1e-8


def _check_finite(arr, opname):
    if not np.isfinite(arr).all():
        raise NumericDomainError(f"{opname}: non-finite values")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axis(axis, ndim):
    return axis + ndim if axis < 0 else axis


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _check_finite(out, "div")

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    out = a.data ** p
    _check_finite(out, "power")
    return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


# -- unary nonlinearities -------------------------------------------------------

def exp(a):
    out = np.exp(a.data)
    _check_finite(out, "exp")
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a):
    if (a.data <= 0).any():
        raise NumericDomainError("log: non-positive input")
    out = np.log(a.data)
    return Tensor._make(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    if (a.data < 0).any():
        raise NumericDomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope=0.2):
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope).astype(a.dtype)
    return Tensor._make(a.data * factor, (a,), lambda g: (g * factor,))


def softplus(a):
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return Tensor._make(out.astype(a.dtype), (a,), lambda g: (g * sig,))


# -- reductions -------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


# -- shape ops ------------------------------------------------------------------

def reshape(a, shape):
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(out, (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx):
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), bw)


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}", *[x.shape for x in xs]) from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(xs), bw)


def stack(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack along axis {axis}", *[x.shape for x in xs]) from exc

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return Tensor._make(out, tuple(xs), bw)


def masked_fill(x, mask, value=0.0):
    """Keep entries where ``mask`` is truthy; entries where mask == 0 become ``value``."""
    x = as_tensor(x)
    keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(keep, x.data, x.dtype.type(value))
    return Tensor._make(out, (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


# -- matmul -------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


# -- normalized exponentials ------------------------------------------------------

def _masked_logits(x, axis, scale, mask):
    z = x.data * x.dtype.type(scale)
    if mask is None:
        return z, None
    keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    return np.where(keep, z, -np.inf), keep


def _stable_exp(z, axis):
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(z - m)
    return m, e, np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis=-1, scale=1.0, mask=None):
    """softmax(scale * x) along ``axis``, max-subtracted.

    Entries where ``mask`` is false get probability 0; a slice whose entries
    are all masked is returned as all zeros.
    """
    x = as_tensor(x)
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    _check_finite(x.data, "softmax")
    z, keep = _masked_logits(x, axis, scale, mask)
    _, e, s = _stable_exp(z, axis)
    y = e / np.where(s > 0, s, 1)

    def bw(g):
        gy = g * y
        return (scale * (gy - y * np.sum(gy, axis=axis, keepdims=True)),)

    return Tensor._make(y.astype(x.dtype), (x,), bw)


def log_softmax(x, axis=-1, scale=1.0, mask=None):
    """log softmax(scale * x); masked entries (and fully masked slices) read as 0."""
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z, keep = _masked_logits(x, axis, scale, mask)
    m, e, s = _stable_exp(z, axis)
    safe_s = np.where(s > 0, s, 1)
    out = z - m - np.log(safe_s)
    y = e / safe_s
    if keep is not None:
        out = np.where(keep, out, 0)

    def bw(g):
        if keep is not None:
            g = np.where(keep, g, 0)
        return (scale * (g - y * np.sum(g, axis=axis, keepdims=True)),)

    return Tensor._make(out.astype(x.dtype), (x,), bw)


def logsumexp(x, axis=-1, mask=None, keepdims=False):
    """log sum exp along ``axis``; a fully masked slice evaluates to 0."""
    x = as_tensor(x)
    _check_finite(x.data, "logsumexp")
    z, keep = _masked_logits(x, axis, 1.0, mask)
    m, e, s = _stable_exp(z, axis)
    empty = s <= 0
    out = np.where(empty, 0, m + np.log(np.where(empty, 1, s)))
    y = e / np.where(empty, 1, s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * y,)

    return Tensor._make(out.astype(x.dtype), (x,), bw)


# -- norms and similarity -------------------------------------------------------

def l2norm(x, axis=-1, keepdims=False):
    """Euclidean norm; the gradient at the zero vector is taken to be 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    unit = x.data / np.where(n > 0, n, 1)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * unit,)

    return Tensor._make(out, (x,), bw)


def cosine_similarity(a, b, axis=-1, eps=COS_EPS):
    """a.b / (|a| |b| + eps) along ``axis`` with broadcasting.

    The epsilon keeps zero vectors finite: their similarity to anything is 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        ad, bd = np.broadcast_arrays(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("cosine_similarity operands do not broadcast", a.shape, b.shape) from exc
    dot = np.sum(ad * bd, axis=axis, keepdims=True)
    na = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(bd * bd, axis=axis, keepdims=True))
    den = na * nb + eps
    out = np.squeeze(dot / den, axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        ua = ad / np.where(na > 0, na, 1)
        ub = bd / np.where(nb > 0, nb, 1)
        k = dot / (den * den)
        ga = g * (bd / den - k * nb * ua)
        gb = g * (ad / den - k * na * ub)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out.astype(ad.dtype), (a, b), bw)


# -- spatial ops (NCHW) -----------------------------------------------------------

def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of x (N,C,H,W) with w (O,C,kh,kw), optional bias (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d input/kernel mismatch", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise ShapeError("conv2d kernel larger than padded input", x.shape, w.shape)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d bias mismatch", b.shape, (o,))
        out = out + b.data
        parents = (x, w, b)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gr = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gr.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gr @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = (gx, gw)
        if b is not None:
            grads = grads + (gr.sum(axis=0),)
        return grads

    return Tensor._make(np.ascontiguousarray(out), parents, bw)


def max_pool2d(x, window):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("max_pool2d expects NCHW", x.shape)
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d window {window} exceeds input", x.shape)
    blocks = x.data[:, :, :ho * window, :wo * window].reshape(n, c, ho, window, wo, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros_like(x.data)
        full[:, :, :ho * window, :wo * window] = gb.reshape(n, c, ho * window, wo * window)
        return (full,)

    return Tensor._make(out, (x,), bw)


def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest expects NCHW", x.shape)
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bw)


# -- losses ---------------------------------------------------------------------------

def bce_with_logits(logits, target):
    """Mean binary cross-entropy of sigmoid(logits) against a constant target."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.broadcast_to(np.asarray(target, dtype=x.dtype), x.shape)
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    n = x.size

    def bw(g):
        return (g * (sig - t) / n,)

    return Tensor._make(np.asarray(out.mean(), dtype=x.dtype), (logits,), bw)
