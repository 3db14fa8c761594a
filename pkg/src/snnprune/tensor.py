"""Dense float64 tensor kernels.

Tensors are plain contiguous ``numpy.ndarray`` objects of dtype float64 in
row-major order. Only the kernels the spiking layers need live here; there
is no autodiff, backward passes are written by hand in :mod:`snnprune.snn`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor shapes do not compose."""


def as_tensor(x) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    if any(d < 1 for d in t.shape):
        raise DimensionError(f"all dimensions must be >= 1, got shape {t.shape}")
    return t


def reshape(x: np.ndarray, shape) -> np.ndarray:
    x = as_tensor(x)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    return x.reshape(shape)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if k > size + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold a batch ``(B, C, H, W)`` into ``(B, H', W', C*k*k)`` patches."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho, wo, c * k * k)


def col2im(cols: np.ndarray, in_shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back into ``in_shape``."""
    b, c, h, w = in_shape
    _, ho, wo, _ = cols.shape
    cols = cols.reshape(b, ho, wo, c, k, k)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d_batch(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate a batch ``(B, C_in, H, W)`` with ``(C_out, C_in, k, k)``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D batch and kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if x.shape[1] != c_in:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    conv_output_size(x.shape[2], k, stride, padding)
    conv_output_size(x.shape[3], k, stride, padding)
    cols = im2col(x, k, stride, padding)
    out = cols @ kernel.reshape(c_out, -1).T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Single-image convolution: ``(C_in, H, W)`` -> ``(C_out, H', W')``."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects a C x H x W input, got {x.shape}")
    return conv2d_batch(x[None], kernel, stride, padding)[0]
