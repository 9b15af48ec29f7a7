"""Dense-tensor layer primitives with hand-derived backward passes.

Everything operates on plain numpy arrays shaped (batch, channels, height,
width).  Forward functions return ``(output, cache)``; the matching backward
takes ``(grad_output, cache)`` and returns gradients for every differentiable
input.  Convolutions are implemented as im2col + GEMM; the transposed
convolution is the exact linear adjoint of the strided convolution, sharing
the same kernel layout (out_channels, in_channels, kh, kw).
"""

from __future__ import annotations

import numpy as np


def require_nchw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a (b, c, h, w) tensor, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# im2col machinery
# ---------------------------------------------------------------------------

def _conv_out_size(size, k, stride, pad):
    # floor semantics: a trailing remainder strip is simply never sampled
    out = (size + 2 * pad - k) // stride + 1
    if out <= 0:
        raise ValueError(
            f"kernel does not fit: size={size} k={k} stride={stride} pad={pad}")
    return out


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + oh * stride:stride,
                                  j:j + ow * stride:stride]
    return cols


def _col2im(cols, x_shape, stride, pad):
    b, c, h, w = x_shape
    _, _, kh, kw, oh, ow = cols.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def _conv_fwd(x, weight, stride, pad):
    cols = _im2col(x, weight.shape[2], weight.shape[3], stride, pad)
    # (b, oh, ow, oc) <- (b, c, kh, kw, oh, ow) . (oc, c, kh, kw)
    y = np.tensordot(cols, weight, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def _conv_bwd_weight(cols, grad_out):
    # (oc, c, kh, kw) <- (b, oc, oh, ow) . (b, c, kh, kw, oh, ow)
    return np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))


def _conv_bwd_input(grad_out, weight, x_shape, stride, pad):
    # (c, kh, kw, b, oh, ow) <- (oc, c, kh, kw) . (b, oc, oh, ow)
    gcol = np.tensordot(weight, grad_out, axes=([0], [1]))
    gcol = np.ascontiguousarray(gcol.transpose(3, 0, 1, 2, 4, 5))
    return _col2im(gcol, x_shape, stride, pad)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias, stride: int = 1, pad: int = 0):
    """2-d cross-correlation with square stride/padding.

    weight: (out_ch, in_ch, kh, kw), bias: (out_ch,).
    """
    x = require_nchw(x)
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    y, cols = _conv_fwd(x, weight, stride, pad)
    y += bias.reshape(1, -1, 1, 1)
    cache = (cols, x.shape, weight, stride, pad)
    return y, cache


def conv2d_backward(grad_out, cache):
    cols, x_shape, weight, stride, pad = cache
    grad_w = _conv_bwd_weight(cols, grad_out)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad_out.dtype)
    grad_x = _conv_bwd_input(grad_out, weight, x_shape, stride, pad)
    return grad_x, grad_w, grad_b


def transposed_conv2d(x, weight, bias, stride: int = 2, pad: int = 0):
    """Transposed convolution: the linear adjoint of conv2d with the same
    kernel.  weight: (in_ch, out_ch, kh, kw) == the adjoint conv's
    (out_ch, in_ch, kh, kw).  Output spatial size: (in - 1)*stride + k - 2*pad.
    """
    x = require_nchw(x)
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernel expects {weight.shape[0]}")
    b, _, h, w = x.shape
    kh, kw = weight.shape[2], weight.shape[3]
    out_h = (h - 1) * stride + kh - 2 * pad
    out_w = (w - 1) * stride + kw - 2 * pad
    y_shape = (b, weight.shape[1], out_h, out_w)
    y = _conv_bwd_input(x, weight, y_shape, stride, pad)
    y += bias.reshape(1, -1, 1, 1)
    cache = (x, weight, stride, pad, y_shape)
    return y, cache


def transposed_conv2d_backward(grad_out, cache):
    x, weight, stride, pad, y_shape = cache
    gcols = _im2col(grad_out, weight.shape[2], weight.shape[3], stride, pad)
    grad_x = np.tensordot(gcols, weight, axes=([1, 2, 3], [1, 2, 3]))
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    grad_w = _conv_bwd_weight(gcols, x)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad_out.dtype)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm2d(x, gamma, beta, running_mean, running_var, mode: str,
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalization over (batch, h, w).

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place (running = momentum*running + (1-momentum)*batch).
    Infer mode normalizes with the running buffers.
    """
    x = require_nchw(x)
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    g = gamma.reshape(1, -1, 1, 1)
    b = beta.reshape(1, -1, 1, 1)
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(running_var.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(1, -1, 1, 1).astype(x.dtype)) \
            * inv_std.reshape(1, -1, 1, 1).astype(x.dtype)
        y = g * xhat + b
        cache = ("train", xhat, inv_std.astype(x.dtype), gamma)
        return y, cache
    inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(x.dtype)
    xhat = (x - running_mean.reshape(1, -1, 1, 1).astype(x.dtype)) \
        * inv_std.reshape(1, -1, 1, 1)
    y = g * xhat + b
    cache = ("infer", xhat, inv_std, gamma)
    return y, cache


def batchnorm2d_backward(grad_out, cache):
    mode, xhat, inv_std, gamma = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
    grad_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
    g = gamma.reshape(1, -1, 1, 1)
    s = inv_std.reshape(1, -1, 1, 1)
    if mode == "infer":
        return grad_out * g * s, grad_gamma, grad_beta
    mean_g = grad_out.mean(axis=(0, 2, 3), dtype=np.float64).reshape(1, -1, 1, 1)
    mean_gx = (grad_out * xhat).mean(axis=(0, 2, 3), dtype=np.float64).reshape(1, -1, 1, 1)
    grad_x = g * s * (grad_out - mean_g.astype(grad_out.dtype)
                      - xhat * mean_gx.astype(grad_out.dtype))
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# elementwise layers
# ---------------------------------------------------------------------------

def relu(x):
    y = np.maximum(x, 0)
    return y, (x > 0)


def relu_backward(grad_out, cache):
    return grad_out * cache


def sigmoid(x):
    # branch on sign so neither exp can overflow
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(grad_out, cache):
    y = cache
    return grad_out * y * (1.0 - y)


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout: train mode zeroes units with probability ``rate`` and
    scales survivors by 1/(1-rate); infer mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return x * mask, mask


def dropout_backward(grad_out, cache):
    if cache is None:
        return grad_out
    return grad_out * cache
