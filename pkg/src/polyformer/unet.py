"""U-Net backbone split into a feature extractor (encoder-decoder) and a 1x1 task head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .engine import ops
from .engine.tensor import DimensionError, Tensor
from .nn import Conv2d, ConvBNReLU, Module


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 3
    num_classes: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"UNetConfig: depth must be >= 1, got {self.depth}")
        if self.num_classes < 2:
            raise ValueError(f"UNetConfig: num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("UNetConfig: channel counts must be positive")

    @property
    def feature_dim(self) -> int:
        """Channel width D at the insertion point (full resolution, before the head)."""
        return self.base_channels

    def to_dict(self) -> dict:
        return asdict(self)


class DoubleConv(Module):
    def __init__(self, c_in: int, c_out: int):
        self.c1 = ConvBNReLU(c_in, c_out)
        self.c2 = ConvBNReLU(c_out, c_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.c2(self.c1(x))


class EncoderDecoder(Module):
    """Feature extractor: U-Net encoder and decoder with skip connections."""

    def __init__(self, cfg: UNetConfig):
        self.cfg = cfg
        b = cfg.base_channels
        self.inc = DoubleConv(cfg.in_channels, b)
        self.down = [DoubleConv(b * 2 ** i, b * 2 ** (i + 1)) for i in range(cfg.depth)]
        # decoder stage i maps depth-level (i+1) back to level i
        self.up = [DoubleConv(b * 2 ** (i + 1) + b * 2 ** i, b * 2 ** i) for i in range(cfg.depth)]

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"U-Net expects B x {cfg.in_channels} x H x W input, got {x.shape}")
        factor = 2 ** cfg.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(f"U-Net depth {cfg.depth}: H, W must be divisible by {factor}, got {x.shape[2:]}")
        skips = [self.inc(x)]
        h = skips[0]
        for stage in self.down:
            h = stage(ops.maxpool2d(h, 2))
            skips.append(h)
        h = skips.pop()
        for i in reversed(range(cfg.depth)):
            h = ops.upsample2x(h)
            h = self.up[i](ops.concat([skips.pop(), h], axis=1))
        return h


class SegHead(Module):
    """1x1 convolution producing per-class logits."""

    def __init__(self, cfg: UNetConfig):
        self.conv = Conv2d(cfg.feature_dim, cfg.num_classes, k=1)
        self.dim = cfg.feature_dim

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.dim:
            raise DimensionError(f"task head expects B x {self.dim} x H x W features, got {f.shape}")
        return self.conv(f)


class SplitModel(Module):
    """Backbone as two halves: ``m1`` (features) and ``m2`` (task head)."""

    def __init__(self, cfg: UNetConfig):
        self.cfg = cfg
        self.m1 = EncoderDecoder(cfg)
        self.m2 = SegHead(cfg)

    def forward(self, x: Tensor) -> Tensor:
        return self.m2(self.m1(x))


def build_unet(cfg: Optional[UNetConfig] = None, seed: int = 0) -> SplitModel:
    """Deterministically initialised split U-Net; parameter names are dotted paths."""
    model = SplitModel(cfg or UNetConfig())
    model.initialize(seed, prefix="backbone.")
    model.assign_names("backbone.")
    return model


def extract_features(m: SplitModel, x: Tensor) -> Tensor:
    return m.m1(x)


def segment(m: SplitModel, f: Tensor) -> Tensor:
    return m.m2(f)


def predict_mask(logits) -> np.ndarray:
    """Argmax over the class axis; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)
