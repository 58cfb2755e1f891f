"""
Array-level layer math on NCHW float32 arrays.

Every forward returns ``(output, cache)`` and the matching backward consumes
that cache. Convolution is a cross-correlation evaluated one kernel tap at a
time, so strided, dilated and grouped (depthwise) cases share one code path.
"""
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from src.errors import InvalidGroupsError, ShapeMismatchError, SlopeLengthMismatchError


class ActivationKind(str, Enum):
    RELU = "relu"
    ELU = "elu"
    PRELU = "prelu"
    HARDSWISH = "hardswish"


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) // 2


def _tap_slice(start: int, stride: int, count: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: Optional[int] = None,
    dilation: int = 1,
    groups: int = 1,
) -> Tuple[np.ndarray, tuple]:
    """
    2-D cross-correlation with zero padding.

    Args:
        x: Input of shape (N, C_in, H, W).
        weight: Kernel of shape (C_out, C_in / groups, k, k).
        bias: Optional bias broadcastable to (1, C_out, 1, 1).
        padding: Defaults to "same" padding ``dilation * (k - 1) // 2``.

    Raises:
        InvalidGroupsError: channel counts not divisible by ``groups``.
        ShapeMismatchError: input channels disagree with the kernel.
    """
    n, c_in, h, w = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise InvalidGroupsError(f"groups={groups} does not divide in={c_in}, out={c_out}")
    if c_in // groups != c_per_group:
        raise ShapeMismatchError(
            f"input has {c_in} channels, kernel expects {c_per_group * groups} (groups={groups})"
        )
    if padding is None:
        padding = same_padding(kh, dilation)
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(f"input {h}x{w} too small for kernel {kh}x{kw}, dilation {dilation}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    og = c_out // groups
    xg = xp.reshape(n, groups, c_per_group, xp.shape[2], xp.shape[3])
    wg = weight.reshape(groups, og, c_per_group, kh, kw)

    out = np.zeros((n, groups, og, oh, ow), dtype=np.float32)
    for i in range(kh):
        rows = _tap_slice(i * dilation, stride, oh)
        for j in range(kw):
            cols = _tap_slice(j * dilation, stride, ow)
            patch = xg[:, :, :, rows, cols]
            out += np.einsum("ngcxy,goc->ngoxy", patch, wg[:, :, :, i, j], optimize=True)
    out = out.reshape(n, c_out, oh, ow)
    if bias is not None:
        out += bias.reshape(1, c_out, 1, 1)
    cache = (xp, weight, x.shape, stride, padding, dilation, groups, bias is not None)
    return out.astype(np.float32, copy=False), cache


def conv2d_backward(
    grad_out: np.ndarray, cache: tuple
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Exact gradients of ``conv2d_forward`` w.r.t. input, weight and bias."""
    xp, weight, in_shape, stride, padding, dilation, groups, has_bias = cache
    n, c_in, h, w = in_shape
    c_out, c_per_group, kh, kw = weight.shape
    if grad_out.shape[:2] != (n, c_out):
        raise ShapeMismatchError(f"grad_out {grad_out.shape} does not match output ({n}, {c_out}, ...)")
    oh, ow = grad_out.shape[2:]
    og = c_out // groups

    g = grad_out.reshape(n, groups, og, oh, ow)
    xg = xp.reshape(n, groups, c_per_group, xp.shape[2], xp.shape[3])
    wg = weight.reshape(groups, og, c_per_group, kh, kw)

    grad_w = np.zeros_like(wg)
    grad_xp = np.zeros_like(xg)
    for i in range(kh):
        rows = _tap_slice(i * dilation, stride, oh)
        for j in range(kw):
            cols = _tap_slice(j * dilation, stride, ow)
            patch = xg[:, :, :, rows, cols]
            grad_w[:, :, :, i, j] = np.einsum("ngoxy,ngcxy->goc", g, patch, optimize=True)
            grad_xp[:, :, :, rows, cols] += np.einsum("ngoxy,goc->ngcxy", g, wg[:, :, :, i, j], optimize=True)

    grad_xp = grad_xp.reshape(xp.shape)
    grad_x = grad_xp[:, :, padding: padding + h, padding: padding + w] if padding else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1) if has_bias else None
    return (
        np.ascontiguousarray(grad_x, dtype=np.float32),
        grad_w.reshape(weight.shape).astype(np.float32),
        None if grad_b is None else grad_b.astype(np.float32),
    )


def activation_forward(
    x: np.ndarray,
    kind: ActivationKind,
    slope: Optional[np.ndarray] = None,
    alpha: float = 1.0,
) -> Tuple[np.ndarray, tuple]:
    """ReLU, ELU(alpha), per-channel PReLU or HardSwish."""
    kind = ActivationKind(kind)
    if kind is ActivationKind.RELU:
        y = np.maximum(x, 0.0)
    elif kind is ActivationKind.ELU:
        y = np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))
    elif kind is ActivationKind.PRELU:
        slope = _check_slope(x, slope)
        y = np.where(x > 0, x, slope * x)
    else:
        y = x * np.clip(x + 3.0, 0.0, 6.0) / 6.0
    return y.astype(np.float32, copy=False), (x, kind, slope, alpha)


def activation_backward(grad_out: np.ndarray, cache: tuple) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Elementwise derivative. At x == 0 (and at the HardSwish knees) the right
    derivative is used. PReLU also returns the slope gradient, summed over
    the negative inputs of each channel.
    """
    x, kind, slope, alpha = cache
    grad_slope = None
    if kind is ActivationKind.RELU:
        grad = grad_out * (x >= 0)
    elif kind is ActivationKind.ELU:
        grad = np.where(x >= 0, grad_out, grad_out * alpha * np.exp(np.minimum(x, 0.0)))
    elif kind is ActivationKind.PRELU:
        grad = np.where(x >= 0, grad_out, grad_out * slope)
        grad_slope = np.where(x < 0, x * grad_out, 0.0).sum(axis=(0, 2, 3)).reshape(slope.shape)
        grad_slope = grad_slope.astype(np.float32)
    else:
        inner = (2.0 * x + 3.0) / 6.0
        grad = grad_out * np.where(x >= 3.0, 1.0, np.where(x >= -3.0, inner, 0.0))
    return grad.astype(np.float32, copy=False), grad_slope


def _check_slope(x: np.ndarray, slope: Optional[np.ndarray]) -> np.ndarray:
    channels = x.shape[1]
    if slope is None or slope.size != channels:
        got = 0 if slope is None else slope.size
        raise SlopeLengthMismatchError(f"PReLU needs {channels} slopes, got {got}")
    return slope.reshape(1, channels, 1, 1)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = False,
) -> Tuple[np.ndarray, tuple]:
    """
    Per-channel batch normalisation.

    In training mode the batch statistics normalise the input. The running
    buffers are never written here: the cache carries the batch mean and the
    unbiased batch variance, and ``batchnorm_running_stats`` turns them into
    the next running values.
    """
    c = x.shape[1]
    gamma = gamma.reshape(1, c, 1, 1)
    beta = beta.reshape(1, c, 1, 1)
    batch_stats = None
    if training:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        count = x.size // c
        batch_stats = (mean, var * count / max(count - 1, 1))
    else:
        mean = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y.astype(np.float32, copy=False), (xhat, inv_std, gamma, training, batch_stats)


def batchnorm_running_stats(
    running_mean: np.ndarray,
    running_var: np.ndarray,
    cache: tuple,
    momentum: float = 0.1,
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Next ``(running_mean, running_var)`` after a training forward; None for inference caches."""
    batch_stats = cache[4]
    if batch_stats is None:
        return None
    mean, unbiased = batch_stats
    new_mean = (1 - momentum) * running_mean + momentum * mean.reshape(running_mean.shape)
    new_var = (1 - momentum) * running_var + momentum * unbiased.reshape(running_var.shape)
    return new_mean.astype(np.float32), new_var.astype(np.float32)


def batchnorm_backward(grad_out: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma, training = cache[:4]
    axes = (0, 2, 3)
    grad_gamma = (grad_out * xhat).sum(axis=axes).reshape(gamma.shape)
    grad_beta = grad_out.sum(axis=axes).reshape(gamma.shape)
    g_xhat = grad_out * gamma
    if training:
        m = grad_out.size // grad_out.shape[1]
        grad_x = inv_std / m * (
            m * g_xhat
            - g_xhat.sum(axis=axes, keepdims=True)
            - xhat * (g_xhat * xhat).sum(axis=axes, keepdims=True)
        )
    else:
        grad_x = g_xhat * inv_std
    return (
        grad_x.astype(np.float32, copy=False),
        grad_gamma.astype(np.float32),
        grad_beta.astype(np.float32),
    )


def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """
    Interpolation weights (out_size x in_size), align-corners=false:
    source = (dst + 0.5) * in / out - 0.5, clamped at the low edge.
    """
    m = np.zeros((out_size, in_size), dtype=np.float64)
    ratio = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_forward(x: np.ndarray, out_h: int, out_w: int) -> Tuple[np.ndarray, tuple]:
    ah = bilinear_matrix(out_h, x.shape[2]).astype(np.float32)
    aw = bilinear_matrix(out_w, x.shape[3]).astype(np.float32)
    y = ah @ x @ aw.T
    return y.astype(np.float32, copy=False), (ah, aw)


def upsample_backward(grad_out: np.ndarray, cache: tuple) -> np.ndarray:
    ah, aw = cache
    return (ah.T @ grad_out @ aw).astype(np.float32, copy=False)


def global_avg_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    return x.mean(axis=(2, 3), keepdims=True).astype(np.float32), (x.shape,)


def global_avg_pool_backward(grad_out: np.ndarray, cache: tuple) -> np.ndarray:
    (shape,) = cache
    area = shape[2] * shape[3]
    return np.broadcast_to(grad_out / area, shape).astype(np.float32)


def concat_forward(inputs) -> Tuple[np.ndarray, tuple]:
    spatial = {t.shape[0:1] + t.shape[2:] for t in inputs}
    if len(spatial) != 1:
        raise ShapeMismatchError(f"concat inputs disagree outside the channel axis: {[t.shape for t in inputs]}")
    return np.concatenate(inputs, axis=1), tuple(t.shape[1] for t in inputs)


def concat_backward(grad_out: np.ndarray, cache: tuple):
    splits = np.cumsum(cache)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=1)]
