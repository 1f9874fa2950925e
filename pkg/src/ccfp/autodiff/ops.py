"""Differentiable layer primitives built on :class:`Tensor`.

Convolution is lowered to a single GEMM over an im2col view; its backward
pass scatters the column gradient back with one strided add per kernel tap.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor, ensure_tensor


def _check_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.ndim != ndim:
        raise DimensionError(f"{what} must be {ndim}-d, got shape {t.shape}")


# -- elementwise ---------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = out > 0
    return Tensor._from_op(out, (x,), lambda g: (g * mask,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


# -- dense layers ----------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    _check_ndim(x, 2, "linear input")
    _check_ndim(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input has {x.shape[1]} features, weight expects {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(out, parents, backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of (B, C, H, W) input with an (O, C, kH, kW) kernel."""
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(kernel, 4, "conv2d kernel")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    B, C, H, W = x.shape
    O, Ck, kH, kW = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kH > Hp or kW > Wp:
        raise DimensionError(f"conv2d: kernel {kH}x{kW} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kH) // stride + 1
    Wo = (Wp - kW) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C*kH*kW, Ho*Wo): keeps the spatial axis innermost so the copy streams
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kH * kW, Ho * Wo)
    wmat = kernel.data.reshape(O, C * kH * kW)
    out = (wmat @ cols).reshape(B, O, Ho, Wo)
    saved_cols = cols if kernel.requires_grad else None

    def backward(g):
        g3 = g.reshape(B, O, Ho * Wo)
        gk = gx = None
        if kernel.requires_grad:
            gk = (g3 @ saved_cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if x.requires_grad:
            # rows ordered (kH, kW, C) so each shifted slice below is one contiguous block
            wt = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0).reshape(kH * kW * C, O))
            dcols = (wt @ g3).reshape(B, kH, kW, C, Ho, Wo)
            dxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kH):
                for j in range(kW):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j]
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window`` x ``window`` patches; ties send gradient to the first maximum."""
    _check_ndim(x, 4, "max_pool2d input")
    stride = window if stride is None else stride
    B, C, H, W = x.shape
    if window < 1 or stride < 1:
        raise ValueError("max_pool2d window and stride must be >= 1")
    if window > H or window > W:
        raise DimensionError(f"max_pool2d: window {window} larger than input {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]

    # scan window offsets in row-major order; a strict ">" keeps the first maximum
    out = x.data[:, :, 0:hs:stride, 0:ws:stride].copy()
    arg = np.zeros(out.shape, dtype=np.int8 if len(offsets) < 128 else np.int32)
    for k, (i, j) in enumerate(offsets[1:], start=1):
        v = x.data[:, :, i:i + hs:stride, j:j + ws:stride]
        upd = v > out
        np.copyto(out, v, where=upd)
        arg[upd] = k

    def backward(g):
        gx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            gx[:, :, i:i + hs:stride, j:j + ws:stride] += np.where(arg == k, g, 0)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    _check_ndim(x, 4, "global_avg_pool input")
    return x.mean(axis=(2, 3))


# -- statistics ------------------------------------------------------------

def channel_stats(x: Tensor, eps: float = 1e-5) -> Tuple[Tensor, Tensor]:
    """Per-instance, per-channel spatial mean and ``sqrt(population var + eps)``."""
    _check_ndim(x, 4, "channel_stats input")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    B, C, H, W = x.shape
    n = H * W
    mu = x.data.mean(axis=(2, 3))
    centered = x.data - mu[:, :, None, None]
    sigma = np.sqrt((centered * centered).mean(axis=(2, 3)) + eps)

    def mu_backward(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.shape).astype(x.dtype, copy=True),)

    def sigma_backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(sigma > 0, g / (n * sigma), 0.0)
        return (centered * scale[:, :, None, None],)

    return (Tensor._from_op(mu, (x,), mu_backward),
            Tensor._from_op(sigma, (x,), sigma_backward))


def batch_norm2d(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, *, train: bool, momentum: float = 0.1,
                 eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Batch normalization over (B, H, W) per channel.

    In train mode the batch statistics normalize the input and, when
    ``update_stats`` is set, the running buffers are updated in place
    (unbiased variance, exponential moving average with ``momentum``).
    """
    _check_ndim(x, 4, "batch_norm2d input")
    B, C, H, W = x.shape
    if weight.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"batch_norm2d: parameters must have shape ({C},)")
    w4 = weight.data[None, :, None, None]
    if train:
        n = B * H * W
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        if update_stats:
            unbiased = var * n / max(n - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None, None]
        out = xhat * w4 + bias.data[None, :, None, None]

        def backward(g):
            gw = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat = g * w4
                gx = (inv_std[None, :, None, None] / n) * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            return gx, gw, gb
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = xhat * w4 + bias.data[None, :, None, None]

        def backward(g):
            gx = g * (w4 * inv_std[None, :, None, None]) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, weight, bias), backward)


# -- losses ----------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    _check_ndim(logits, 2, "logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, K = logits.shape
    if labels.shape[0] != B:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = ez / denom
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def l2_squared(a: Tensor, b) -> Tensor:
    """Sum of squared differences. ``b`` may be a scalar, broadcast to ``a``."""
    a = ensure_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise DimensionError(f"l2_squared shapes differ: {a.shape} vs {b.shape}")
    else:
        b = np.asarray(b, dtype=a.dtype)
        if b.ndim and b.shape != a.shape:
            raise DimensionError(f"l2_squared shapes differ: {a.shape} vs {b.shape}")
        b = Tensor(np.broadcast_to(b, a.shape))
    diff = a - b
    return (diff * diff).sum()


def frobenius_norm(m: Tensor, axis=None) -> Tensor:
    """``sqrt(sum(m**2))`` over ``axis`` (all axes by default).

    The gradient at an exactly-zero input is defined as zero.
    """
    m = ensure_tensor(m)
    norm = np.sqrt((m.data * m.data).sum(axis=axis))

    def backward(g):
        n = norm if axis is None else np.expand_dims(norm, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(n > 0, gg / n, 0.0)
        return (m.data * scale,)

    return Tensor._from_op(np.asarray(norm, dtype=m.dtype), (m,), backward)
