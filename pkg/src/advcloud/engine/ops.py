"""Differentiable primitives.

Images and feature maps use NCHW layout throughout. Each function returns a
new :class:`Tensor`; backward closures only compute gradients for inputs that
require them.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from advcloud.engine.tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return record("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return record("div", out, (a, b), vjp)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is 1 on the closed interval, 0 outside."""
    x = as_tensor(x)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (x.data >= lo_v) & (x.data <= hi_v)
    return record("clamp", np.clip(x.data, lo_v, hi_v), (x,), lambda g: (g * inside,))


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs, axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and a != b for i, (a, b) in enumerate(zip(ref, other))
        ):
            raise ShapeError("concat", xs[0].shape, t.shape)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, xs))

    return record("concat", out, xs, vjp)


def take_rows(x, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]`` along the leading axis."""
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError("take_rows", x.shape, (start, stop))

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return record("take_rows", x.data[start:stop].copy(), [x], vjp)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError("conv2d bias", b.shape, (w.shape[0],))
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    s, p, d = stride, padding, dilation
    Hp, Wp = H + 2 * p, W + 2 * p
    Ho = (Hp - d * (kh - 1) - 1) // s + 1
    Wo = (Wp - d * (kw - 1) - 1) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    if kh == kw == 1 and s == 1:
        cols = xp.reshape(N, C, Ho * Wo)
    else:
        cols6 = np.empty((N, C, kh, kw, Ho, Wo))
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, i, j] = xp[:, :, i * d : i * d + s * (Ho - 1) + 1 : s,
                                       j * d : j * d + s * (Wo - 1) + 1 : s]
        cols = cols6.reshape(N, C * kh * kw, Ho * Wo)
    w2 = w.data.reshape(O, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(N, O, Ho, Wo)

    def vjp(g):
        g2 = g.reshape(N, O, Ho * Wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if kh == kw == 1 and s == 1:
                gxp = dcols.reshape(N, C, Hp, Wp)
            else:
                dcols = dcols.reshape(N, C, kh, kw, Ho, Wo)
                gxp = np.zeros((N, C, Hp, Wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i * d : i * d + s * (Ho - 1) + 1 : s,
                            j * d : j * d + s * (Wo - 1) + 1 : s] += dcols[:, :, i, j]
            gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", out, inputs, vjp)


@lru_cache(maxsize=64)
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row i holds the half-pixel-centred linear weights of output i."""
    A = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1.0 - frac)
    np.add.at(A, (rows, i1), frac)
    A.setflags(write=False)
    return A


def resize_bilinear(x, size) -> Tensor:
    """Bilinear resize of the two trailing axes to ``size=(H_out, W_out)``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("resize_bilinear", x.shape, size)
    Ho, Wo = size
    H, W = x.shape[-2:]
    Ah, Aw = _interp_matrix(Ho, H), _interp_matrix(Wo, W)
    out = Ah @ (x.data @ Aw.T)

    def vjp(g):
        return (Ah.T @ (g @ Aw),)

    return record("resize_bilinear", out, (x,), vjp)


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    In training mode batch statistics are used and the running buffers
    (numpy arrays, updated in place) move as ``r = momentum*r + (1-momentum)*batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0, 2, 3)
    shp = (1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

    def vjp(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shp)
            if training:
                gx = (inv.reshape(shp) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv.reshape(shp)
        return gx, gg, gb

    return record("batch_norm", out, (x, gamma, beta), vjp)


def bce(pred, target, eps: float = 1e-6) -> Tensor:
    """Per-pixel binary cross-entropy with ``pred`` clipped to ``[eps, 1-eps]``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("bce", pred.shape, target.shape)
    p = np.clip(pred.data, eps, 1.0 - eps)
    y = target.data
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))

    def vjp(g):
        gp = g * (p - y) / (p * (1.0 - p)) if pred.requires_grad else None
        gy = g * (np.log1p(-p) - np.log(p)) if target.requires_grad else None
        return gp, gy

    return record("bce", out, (pred, target), vjp)


def l1(a, b) -> Tensor:
    """Mean absolute difference (scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("l1", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    sgn = np.sign(diff) / n

    def vjp(g):
        return (
            g * sgn if a.requires_grad else None,
            -g * sgn if b.requires_grad else None,
        )

    return record("l1", np.abs(diff).mean(), (a, b), vjp)


__all__ = [
    "add", "sub", "mul", "div", "scale", "relu", "sigmoid", "log", "clamp",
    "sum", "mean", "reshape", "concat", "conv2d", "resize_bilinear",
    "batch_norm", "bce", "l1",
]

