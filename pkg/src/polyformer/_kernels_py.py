"""Pure-numpy im2col / col2im, same layout and summation order as the compiled kernels."""

import numpy as np


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = x[:, :, ki:ki + stride * (Ho - 1) + 1:stride, kj:kj + stride * (Wo - 1) + 1:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * Ho * Wo)


def col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = cols.reshape(C, k, k, B, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * (Ho - 1) + 1:stride, kj:kj + stride * (Wo - 1) + 1:stride] += \
                cols[:, ki, kj].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)
