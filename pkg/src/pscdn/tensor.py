"""Dense 1-D convolutional primitives with explicit backward passes.

Every array here is laid out as ``(batch, channels, length)``.  A single
tensor of shape ``(channels, length)`` is accepted wherever a batch is and
the result keeps the caller's rank.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


class ConfigurationError(ValueError):
    """Raised for invalid layer or primitive configuration."""


class PrimitiveGradient(NamedTuple):
    input_grad: np.ndarray
    param_grads: tuple[np.ndarray, ...] = ()


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (channels, length) or (batch, channels, length), got {x.shape}")
    return x, False


def _restore(y: np.ndarray, squeezed: bool) -> np.ndarray:
    return y[0] if squeezed else y


def _check_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> int:
    if weights.ndim != 3:
        raise ShapeError(f"weights must be (out_ch, in_ch, kernel), got {weights.shape}")
    out_ch, in_ch, ksize = weights.shape
    if ksize % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {ksize}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {in_ch}")
    if bias.shape != (out_ch,):
        raise ShapeError(f"bias must have shape ({out_ch},), got {bias.shape}")
    return ksize


def _windows(x: np.ndarray, ksize: int) -> np.ndarray:
    # (B, Cin, L, k) view over the zero-padded input
    half = (ksize - 1) // 2
    padded = np.pad(x, ((0, 0), (0, 0), (half, half)))
    return sliding_window_view(padded, ksize, axis=2)


def conv1d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 1-D convolution (cross-correlation, stride 1)."""
    xb, squeezed = _batched(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    ksize = _check_conv(xb, weights, bias)
    batch, in_ch, length = xb.shape
    out_ch = weights.shape[0]
    if ksize == 1:
        y = np.matmul(weights[:, :, 0], xb)
    else:
        cols = _windows(xb, ksize).transpose(0, 2, 1, 3).reshape(batch, length, in_ch * ksize)
        y = np.matmul(cols, weights.reshape(out_ch, in_ch * ksize).T).transpose(0, 2, 1)
    y = y + bias[None, :, None]
    return _restore(y, squeezed)


def conv1d_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray) -> PrimitiveGradient:
    """Gradients of ``conv1d`` w.r.t. input, weights and bias."""
    xb, squeezed = _batched(x)
    dy, _ = _batched(upstream)
    weights = np.asarray(weights)
    out_ch, in_ch, ksize = weights.shape
    batch, _, length = xb.shape
    db = dy.sum(axis=(0, 2))
    if ksize == 1:
        w2 = weights[:, :, 0]
        dw = np.einsum("bol,bil->oi", dy, xb)[:, :, None]
        dx = np.matmul(w2.T, dy)
    else:
        half = (ksize - 1) // 2
        cols = _windows(xb, ksize).transpose(0, 2, 1, 3).reshape(batch * length, in_ch * ksize)
        dy_rows = dy.transpose(0, 2, 1).reshape(batch * length, out_ch)
        dw = (dy_rows.T @ cols).reshape(out_ch, in_ch, ksize)
        # scatter each tap's contribution back onto the padded input
        dcols = (dy_rows @ weights.reshape(out_ch, in_ch * ksize)).reshape(batch, length, in_ch, ksize)
        dpad = np.zeros((batch, in_ch, length + 2 * half), dtype=dcols.dtype)
        for k in range(ksize):
            dpad[:, :, k:k + length] += dcols[:, :, :, k].transpose(0, 2, 1)
        dx = dpad[:, :, half:half + length]
    return PrimitiveGradient(_restore(dx, squeezed), (dw, db))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> PrimitiveGradient:
    # subgradient 0 at x == 0
    return PrimitiveGradient(np.where(np.asarray(x) > 0, upstream, 0).astype(np.result_type(upstream)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(y: np.ndarray, upstream: np.ndarray) -> PrimitiveGradient:
    """Backward pass given the sigmoid *output* ``y``."""
    return PrimitiveGradient(upstream * y * (1 - y))


class BatchNormCache(NamedTuple):
    x_hat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def batch_norm(x_batch: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, BatchNormCache]:
    """Training-mode normalisation with mini-batch statistics, no affine terms.

    Statistics are per channel, pooled over the batch and spatial axes, with
    the biased (1/n) variance.
    """
    x = np.asarray(x_batch)
    if x.ndim != 3:
        raise ShapeError(f"batch_norm expects (batch, channels, length), got {x.shape}")
    if x.shape[0] < 2:
        raise ConfigurationError("batch_norm needs a batch of at least 2 in training mode")
    mean = x.mean(axis=(0, 2))
    centered = x - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    with np.errstate(divide="ignore"):
        inv_std = 1.0 / np.sqrt(var + eps)
    if eps == 0:
        inv_std = np.where(var > 0, inv_std, 0)
    x_hat = centered * inv_std[None, :, None]
    return x_hat, BatchNormCache(x_hat, inv_std, mean, var)


def batch_norm_inference(x: np.ndarray, mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    xb, squeezed = _batched(x)
    y = (xb - mean[None, :, None]) / np.sqrt(var[None, :, None] + eps)
    return _restore(y, squeezed)


def batch_norm_backward(cache: BatchNormCache, upstream: np.ndarray) -> PrimitiveGradient:
    dy = np.asarray(upstream)
    n = dy.shape[0] * dy.shape[2]
    sum_dy = dy.sum(axis=(0, 2))[None, :, None]
    sum_dy_xhat = (dy * cache.x_hat).sum(axis=(0, 2))[None, :, None]
    dx = cache.inv_std[None, :, None] / n * (n * dy - sum_dy - cache.x_hat * sum_dy_xhat)
    return PrimitiveGradient(dx)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``a``'s channels followed by ``b``'s."""
    ab, squeezed = _batched(a)
    bb, _ = _batched(b)
    if ab.shape[2] != bb.shape[2] or ab.shape[0] != bb.shape[0]:
        raise ShapeError(f"cannot concatenate {np.shape(a)} and {np.shape(b)}")
    return _restore(np.concatenate([ab, bb], axis=1), squeezed)


def concat_channels_backward(split: int, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split the upstream gradient at channel ``split`` (``a``'s channel count)."""
    dy = np.asarray(upstream)
    axis = dy.ndim - 2
    return np.split(dy, [split], axis=axis)


def residual_sub(inp: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    if np.shape(inp) != np.shape(estimate):
        raise ShapeError(f"residual_sub shape mismatch: {np.shape(inp)} vs {np.shape(estimate)}")
    return np.asarray(inp) - np.asarray(estimate)


def residual_sub_backward(upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return upstream, -upstream


def reshape(x: np.ndarray, new_shape: tuple[int, int]) -> np.ndarray:
    """Reshape each tensor in the batch to ``(channels, length)`` row-major."""
    xb, squeezed = _batched(x)
    if int(np.prod(new_shape)) != xb.shape[1] * xb.shape[2]:
        raise ShapeError(f"cannot reshape {xb.shape[1:]} into {tuple(new_shape)}")
    return _restore(xb.reshape(xb.shape[0], *new_shape), squeezed)


def reshape_backward(input_shape: tuple[int, ...], upstream: np.ndarray) -> PrimitiveGradient:
    return PrimitiveGradient(np.asarray(upstream).reshape(input_shape))
