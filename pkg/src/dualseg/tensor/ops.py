"""Differentiable primitives.

Every op takes and returns :class:`Tensor` objects and records a backward
closure on the active tape when any input requires a gradient.  Convolutions
use the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .core import Tensor, make_output

ArrayLike = Union[Tensor, np.ndarray]

BN_MOMENTUM = 0.99
BN_EPS = 1e-3
PROB_CLAMP = 1e-7
DICE_SMOOTH = 1.0


def _arr(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _as_tensor(x: ArrayLike, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{op}: expected N x C x H x W input, got shape {x.shape}")


def _out_size(n: int, k: int, stride: int, pad: int, op: str) -> int:
    size = (n + 2 * pad - k) // stride + 1
    if n + 2 * pad - k < 0 or size <= 0:
        raise ValueError(f"{op}: non-positive output size for input {n}, kernel {k}, stride {stride}, pad {pad}")
    return size


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense 2-D cross-correlation.

    Args:
        x: ``N x I x H x W`` input.
        weight: ``O x I x kH x kW`` kernel.
        bias: optional length-``O`` bias.
        stride: spatial stride (>= 1).
        pad: symmetric zero padding (>= 0).
    """
    _check4(x, "conv2d")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"conv2d: channel mismatch, input has {c} channels, kernel expects {i}")
    if kh < 1 or kw < 1:
        raise ValueError("conv2d: kernel dims must be >= 1")
    ho = _out_size(h, kh, stride, pad, "conv2d")
    wo = _out_size(w, kw, stride, pad, "conv2d")
    wmat = weight.data.reshape(o, -1)

    if kh == 1 and kw == 1 and pad == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        xs = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
        out = np.matmul(wmat, xs)
        if bias is not None:
            out += bias.data[None, :, None]
        out = out.reshape(n, o, ho, wo)

        def back(g):
            g3 = g.reshape(n, o, ho * wo)
            dw = None
            if weight.requires_grad:
                dw = np.matmul(g3, xs.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            db = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
            dx = None
            if x.requires_grad:
                dxs = np.matmul(wmat.T, g3).reshape(n, c, ho, wo)
                if stride > 1:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = dxs
                else:
                    dx = dxs
            return dx, dw, db

    else:
        xp = _pad_hw(x.data, pad)
        # channel-major im2col: (N, C, kH, kW, Ho, Wo) keeps every copy contiguous in Wo
        col = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
        for a in range(kh):
            for b in range(kw):
                col[:, :, a, b] = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
        col = col.reshape(n, c * kh * kw, ho * wo)
        out = np.matmul(wmat, col)
        if bias is not None:
            out += bias.data[None, :, None]
        out = out.reshape(n, o, ho, wo)

        def back(g):
            g3 = g.reshape(n, o, ho * wo)
            dw = None
            if weight.requires_grad:
                dw = np.matmul(g3, col.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            db = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
            dx = None
            if x.requires_grad:
                dcol = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros_like(xp)
                for a in range(kh):
                    for b in range(kw):
                        dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += dcol[:, :, a, b]
                dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out, inputs, back)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel spatial cross-correlation with a ``C x 1 x kH x kW`` kernel."""
    _check4(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: weight shape {weight.shape} does not match {c} input channels")
    kh, kw = weight.shape[2:]
    ho = _out_size(h, kh, stride, pad, "depthwise_conv2d")
    wo = _out_size(w, kw, stride, pad, "depthwise_conv2d")
    xp = _pad_hw(x.data, pad)
    k = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            out += k[:, a, b][None, :, None, None] * xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]

    def back(g):
        dw = None
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for a in range(kh):
                for b in range(kw):
                    patch = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
                    dw[:, 0, a, b] = np.einsum("nchw,nchw->c", g, patch, optimize=False)
        dx = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += k[:, a, b][None, :, None, None] * g
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, dw

    return make_output("depthwise_conv2d", out, (x, weight), back)


# --------------------------------------------------------------------------
# channel pooling and concatenation
# --------------------------------------------------------------------------

def channel_mean(x: Tensor) -> Tensor:
    _check4(x, "channel_mean")
    c = x.shape[1]
    if c < 1:
        raise ValueError("channel_mean: need at least one channel")
    out = x.data.mean(axis=1, keepdims=True)

    def back(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return make_output("channel_mean", out, (x,), back)


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel maximum over channels; the gradient goes to the first arg-max."""
    _check4(x, "channel_max")
    if x.shape[1] < 1:
        raise ValueError("channel_max: need at least one channel")
    idx = np.argmax(x.data, axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def back(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g, axis=1)
        return (dx,)

    return make_output("channel_max", out, (x,), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "concat_channels")
    _check4(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def back(g):
        return g[:, :ca], g[:, ca:]

    return make_output("concat_channels", out, (a, b), back)


# --------------------------------------------------------------------------
# activations and elementwise arithmetic
# --------------------------------------------------------------------------

def relu6(x: Tensor) -> Tensor:
    out = np.clip(x.data, 0, 6)

    def back(g):
        return (g * ((x.data > 0) & (x.data < 6)),)

    return make_output("relu6", out, (x,), back)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for large |v|
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def back(g):
        return (g * out * (1 - out),)

    return make_output("sigmoid", out, (x,), back)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: ArrayLike) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output("add", out, (a, b), back)


def mul(a: Tensor, b: ArrayLike) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_output("mul", out, (a, b), back)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    out = a.data * factor

    def back(g):
        return (g * factor,)

    return make_output("scale", out, (a,), back)


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def back(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return make_output("sum", out, (a,), back)


# --------------------------------------------------------------------------
# normalization and resampling
# --------------------------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics (biased variance over N, H, W) are used
    and ``running_mean``/``running_var`` are updated in place as
    ``r <- momentum * r + (1 - momentum) * batch``.
    """
    _check4(x, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm: parameters do not match {c} channels")
    bshape = (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_output("batchnorm", out, (x, gamma, beta), back)


def _up2(v: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel bilinear x2 along one axis, edge-clamped
    v = np.moveaxis(v, axis, -1)
    prev = np.concatenate([v[..., :1], v[..., :-1]], axis=-1)
    nxt = np.concatenate([v[..., 1:], v[..., -1:]], axis=-1)
    out = np.empty(v.shape[:-1] + (2 * v.shape[-1],), dtype=v.dtype)
    out[..., 0::2] = 0.75 * v + 0.25 * prev
    out[..., 1::2] = 0.75 * v + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_t(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    d = 0.75 * (ge + go)
    d[..., :-1] += 0.25 * ge[..., 1:]
    d[..., 0] += 0.25 * ge[..., 0]
    d[..., 1:] += 0.25 * go[..., :-1]
    d[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(d, -1, axis)


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear x2 upsampling with half-pixel centers (align-corners off)."""
    _check4(x, "upsample_bilinear")
    if factor != 2:
        raise ValueError("upsample_bilinear: only factor 2 is supported")
    out = np.ascontiguousarray(_up2(_up2(x.data, 2), 3))

    def back(g):
        return (np.ascontiguousarray(_up2_t(_up2_t(g, 3), 2)),)

    return make_output("upsample_bilinear", out, (x,), back)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _check_pair(pred: Tensor, target: np.ndarray, op: str) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{op}: shape mismatch {pred.shape} vs {target.shape}")


def soft_dice_loss(pred: Tensor, target: ArrayLike, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` over the whole batch."""
    t = _arr(target).astype(pred.dtype)
    _check_pair(pred, t, "soft_dice_loss")
    p = pred.data
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    num = 2 * inter + smooth
    out = np.asarray(1 - num / denom, dtype=pred.dtype)

    def back(g):
        d = -(2 * t * denom - num) / denom ** 2
        return ((g * d).astype(pred.dtype),)

    return make_output("soft_dice_loss", out, (pred,), back)


def bce_loss(pred: Tensor, target: ArrayLike, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[clamp, 1 - clamp]``."""
    t = _arr(target).astype(pred.dtype)
    _check_pair(pred, t, "bce_loss")
    raw = pred.data
    p = np.clip(raw, clamp, 1 - clamp)
    size = p.size
    out = np.asarray(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean(), dtype=pred.dtype)

    def back(g):
        inside = (raw > clamp) & (raw < 1 - clamp)
        d = (-(t / p) + (1 - t) / (1 - p)) / size
        return ((g * d * inside).astype(pred.dtype),)

    return make_output("bce_loss", out, (pred,), back)
