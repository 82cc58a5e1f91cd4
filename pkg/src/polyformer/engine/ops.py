"""Differentiable operations.

Every op takes and returns :class:`Tensor`. Shapes must match exactly; the only
broadcast allowed is adding a bias whose shape equals the trailing axes of the
other operand.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .. import kernels
from .tensor import DimensionError, NumericError, Tensor, make_result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum_to_trailing(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    b_shape = b.shape

    def bw(g, needs):
        return g, _sum_to_trailing(g, b_shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g, needs: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g, needs: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g, needs):
        ga = g / bd
        return ga, (-ga * out if needs[1] else None)

    return make_result(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g, needs: (g * g.dtype.type(c),), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result(a.data + a.data.dtype.type(c), (a,), lambda g, needs: (g,), "add_scalar")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g, needs: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g, needs: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))
    return make_result(out, (a,), lambda g, needs: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    t = x.dtype.type
    inner = t(_GELU_C) * (x + t(0.044715) * x ** 3)
    th = np.tanh(inner)
    out = t(0.5) * x * (t(1) + th)

    def bw(g, needs):
        dinner = t(_GELU_C) * (t(1) + t(3 * 0.044715) * x * x)
        d = t(0.5) * (t(1) + th) + t(0.5) * x * (t(1) - th * th) * dinner
        return (g * d,)

    return make_result(out, (a,), bw, "gelu")


# shape ------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_result(out, (a,), lambda g, needs: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g, needs: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return permute(a, (1, 0))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, needs):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


# reductions -------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (R x K) and b (K x S)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return make_result(ad @ bd, (a, b), bw, "matmul")


# softmax family ---------------------------------------------------------------

def _check_finite(op: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    x = a.data
    _check_finite("softmax", x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


softmax_axis = softmax


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite("log_softmax", x)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g, needs):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), bw, "log_softmax")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixel-wise cross-entropy; logits B x C x H x W, target B x H x W ints."""
    target = np.asarray(target)
    if logits.ndim != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    x = logits.data
    _check_finite("cross_entropy", x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(s)
    idx = target[:, None].astype(np.intp)
    n = target.size
    loss = -np.take_along_axis(logp, idx, axis=1).sum() / x.dtype.type(n)

    def bw(g, needs):
        grad = e / s
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1, axis=1)
        return (grad * (g / x.dtype.type(n)),)

    return make_result(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of raw logits against 0/1 labels."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    _check_finite("bce_with_logits", z)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def bw(g, needs):
        sig = 1 / (1 + np.exp(-z))
        return ((sig - y) * (g / z.dtype.type(z.size)),)

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), bw, "bce_with_logits")


# network ops ------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (B x Cin x H x W) with w (Cout x Cin x k x k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cw, k, k2 = w.shape
    if Cw != Cin:
        raise DimensionError(f"conv2d: input has {Cin} channels, weight {w.shape} expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {w.shape}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {k}")
    cols = kernels.im2col(x.data, k, stride, pad)
    w2 = w.data.reshape(Cout, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g, needs):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, -1)
        gx = kernels.col2im(w2.T @ gm, x.shape, k, stride, pad) if needs[0] else None
        gw = (gm @ cols.T).reshape(w.shape) if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return make_result(out, inputs, bw, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"maxpool2d: spatial size {(H, W)} not divisible by {size}")
    blocks = x.data.reshape(B, C, H // size, size, W // size, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // size, W // size, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g, needs):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, H // size, W // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gb.reshape(B, C, H, W)),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align-corners linear interpolation
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m.astype(dtype)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling (align-corners), as two separable matrix products."""
    B, C, H, W = x.shape
    uh = _interp_matrix(H, 2 * H, x.dtype)
    uw = _interp_matrix(W, 2 * W, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g, needs):
        return (np.ascontiguousarray(np.matmul(np.matmul(uh.T, g), uw)),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "upsample2x")


def global_avg_pool(x: Tensor) -> Tensor:
    """B x C x H x W -> B x C."""
    B, C, H, W = x.shape
    n = H * W

    def bw(g, needs):
        return (np.broadcast_to((g / g.dtype.type(n))[:, :, None, None], x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: Optional[np.ndarray] = None,
               var: Optional[np.ndarray] = None, eps: float = 1e-5):
    """Per-channel normalisation of x (B x C x H x W) then affine.

    With ``mean``/``var`` given (eval) they are used as constants; otherwise
    batch statistics are used and returned alongside the output as
    ``(out, batch_mean, batch_var_unbiased)``.
    """
    xd = x.data
    t = xd.dtype.type
    axes = (0, 2, 3)
    batch = mean is None
    if batch:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        v = xd.var(axis=axes)
    else:
        mu, v = mean.astype(xd.dtype), var.astype(xd.dtype)
    inv = t(1) / np.sqrt(v + t(eps))
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    gd = gamma.data

    def bw(g, needs):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd[None, :, None, None]
        if batch:
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv[None, :, None, None]
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    res = make_result(out, (x, gamma, beta), bw, "batch_norm")
    if batch:
        return res, mu, v * t(n / (n - 1))
    return res


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then per-feature affine."""
    xd = x.data
    t = xd.dtype.type
    D = xd.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: width {D} vs affine {gamma.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    inv = t(1) / np.sqrt(xd.var(axis=-1, keepdims=True) + t(eps))
    xhat = (xd - mu) * inv
    gd = gamma.data

    def bw(g, needs):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the gradient by -lam."""
    if lam < 0:
        raise ValueError(f"grad_reverse: lambda must be non-negative, got {lam}")
    factor = -float(lam)
    return make_result(x.data.copy(), (x,), lambda g, needs: (g * g.dtype.type(factor),), "grad_reverse")
