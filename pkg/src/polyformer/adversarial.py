"""Domain discriminator behind a gradient reversal layer."""

from __future__ import annotations

import numpy as np

from .engine import ops
from .engine.tensor import ContractError, Tensor
from .nn import BatchNorm2d, Conv2d, GradientReversal, Module

SOURCE_LABEL = 0.0
TARGET_LABEL = 1.0


class DiscStage(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, bn: bool, relu: bool):
        self.conv = Conv2d(c_in, c_out, 3, stride=stride, bias=not bn)
        self.bn = BatchNorm2d(c_out) if bn else None
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h)
        return ops.relu(h) if self.relu else h


class Discriminator(Module):
    """Five 3x3 conv stages (16, 32, 64, 64, 1 channels), stride 2 except the
    last, BatchNorm in stages 2-4, then global average pooling to one logit.

    The reversal layer sits in front of everything, so every discriminator
    weight is trained normally while the generator sees flipped gradients.
    """

    def __init__(self, in_channels: int, lam: float = 1.0, widths=(16, 32, 64, 64)):
        self.grl = GradientReversal(lam)
        chans = (in_channels,) + tuple(widths)
        self.stage = [DiscStage(chans[i], chans[i + 1], 2, bn=0 < i < 4, relu=True) for i in range(4)]
        self.stage.append(DiscStage(chans[4], 1, 1, bn=False, relu=False))
        self.in_channels = in_channels

    @property
    def lam(self) -> float:
        return self.grl.lam

    def forward(self, x: Tensor, reverse: bool = True) -> Tensor:
        h = self.grl(x) if reverse else x
        for st in self.stage:
            h = st(h)
        return ops.global_avg_pool(h).reshape(x.shape[0])


def build_discriminator(in_channels: int, lam: float = 1.0, seed: int = 0) -> Discriminator:
    d = Discriminator(in_channels, lam)
    d.initialize(seed, prefix="disc.")
    d.assign_names("disc.")
    return d


def adv_loss(d: Discriminator, source_input: Tensor, target_input: Tensor, mode: str = "features",
             reverse: bool = True) -> Tensor:
    """Binary cross-entropy of the discriminator, source labelled 0 and target 1.

    ``mode`` is 'features' (polyformer output maps) or 'masks' (per-pixel class
    probabilities). The two batches go through the discriminator together.
    """
    if source_input is None or target_input is None:
        raise ContractError("adv_loss needs both a source and a target batch")
    if mode not in ("features", "masks"):
        raise ValueError(f"adv_loss: unknown mode {mode!r}")
    if mode == "masks":
        for t in (source_input, target_input):
            s = t.data.sum(axis=1)
            if not np.allclose(s, 1.0, atol=1e-5):
                raise ContractError("mask-mode input must be per-pixel class probabilities")
    both = ops.concat([source_input, target_input], axis=0)
    labels = np.concatenate([np.full(source_input.shape[0], SOURCE_LABEL),
                             np.full(target_input.shape[0], TARGET_LABEL)])
    return ops.bce_with_logits(d(both, reverse=reverse), labels)
