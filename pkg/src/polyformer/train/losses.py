"""Segmentation losses: soft dice and the CE + dice composite."""

from __future__ import annotations

import numpy as np

from ..engine import ops
from ..engine.tensor import DimensionError, Tensor


def one_hot(mask: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    """B x H x W ints -> B x C x H x W."""
    mask = np.asarray(mask)
    return (mask[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def dice_loss(probs: Tensor, mask: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - soft dice, averaged over foreground classes (1..C-1) and the batch."""
    mask = np.asarray(mask)
    if probs.ndim != 4 or mask.shape != (probs.shape[0],) + probs.shape[2:]:
        raise DimensionError(f"dice_loss: probs {probs.shape} vs mask {mask.shape}")
    B, C = probs.shape[:2]
    y = one_hot(mask, C, probs.dtype)
    inter = ops.sum(ops.mul(probs, Tensor(y, dtype=probs.dtype)), axis=(2, 3))
    psum = ops.sum(probs, axis=(2, 3))
    num = ops.add_scalar(ops.scale(inter, 2.0), smooth)
    den = ops.add(psum, Tensor(y.sum(axis=(2, 3)) + smooth, dtype=probs.dtype))
    ratio = ops.div(num, den)
    weights = np.ones((B, C), dtype=probs.dtype)
    weights[:, 0] = 0
    score = ops.sum(ops.mul(ratio, Tensor(weights, dtype=probs.dtype)))
    return ops.add_scalar(ops.scale(score, -1.0 / (B * (C - 1))), 1.0)


def composite_loss(logits: Tensor, mask: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Average of pixel-wise cross-entropy and dice loss."""
    ce = ops.cross_entropy(logits, mask)
    dl = dice_loss(ops.softmax(logits, axis=1), mask, smooth)
    return ops.scale(ops.add(ce, dl), 0.5)
