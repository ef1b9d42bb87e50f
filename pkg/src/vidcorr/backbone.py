"""Trainable feature extractor mapping image patches to feature grids.

The default is a small four-stage convolutional network (conv + group
normalization + leaky ReLU per stage, one stride-2 stage per factor of 2 in
the configured stride) sized to train on CPU in minutes.  A deeper
ResNet-18-style truncation is selectable for larger runs; both expose the
same contract: a patch of side ``p`` yields a ``p/stride`` square feature
grid.  Normalization is per-instance, so evaluation is batch-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .affinity import FeatureMap
from .errors import ValidationError


@dataclass
class BackboneConfig:
    stride: int = 4
    channels: int = 64
    depth: int = 4
    seed: int = 0
    kind: str = "small"

    def __post_init__(self):
        if self.stride not in (4, 8):
            raise ValidationError(f"stride must be 4 or 8, got {self.stride}")
        if self.channels < 1 or self.depth < 1:
            raise ValidationError("channels and depth must be positive")
        if self.kind not in ("small", "resnet"):
            raise ValidationError(f"unknown backbone kind {self.kind!r}")
        n_down = self.stride.bit_length() - 1
        if self.kind == "small" and self.depth < n_down:
            raise ValidationError(
                f"depth {self.depth} cannot realize stride {self.stride}"
            )


def _stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    groups = max(1, min(8, out_ch))
    while out_ch % groups:
        groups -= 1
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, out_ch),
        nn.LeakyReLU(0.1),
    )


class _ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.act = nn.LeakyReLU(0.1)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.GroupNorm(8, out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class Backbone(nn.Module):
    """Feature extractor; ``forward`` maps ``(B, 3, H, W)`` to ``(B, C, H/s, W/s)``."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        n_down = config.stride.bit_length() - 1
        if config.kind == "small":
            widths = [32, 64] + [64] * max(0, config.depth - 3) + [config.channels]
            widths = widths[: config.depth - 1] + [config.channels]
            stages = []
            in_ch = 3
            for i, out_ch in enumerate(widths):
                stages.append(_stage(in_ch, out_ch, 2 if i < n_down else 1))
                in_ch = out_ch
            self.body = nn.Sequential(*stages)
        else:
            stem_stride = 2 if config.stride == 8 else 1
            self.body = nn.Sequential(
                nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
                nn.GroupNorm(8, 64),
                nn.LeakyReLU(0.1),
                nn.MaxPool2d(3, stride=stem_stride, padding=1),
                _ResidualBlock(64, 64),
                _ResidualBlock(64, 64),
                _ResidualBlock(64, 128, stride=2),
                _ResidualBlock(128, 128),
                _ResidualBlock(128, 256),
                _ResidualBlock(256, 256),
                nn.Conv2d(256, config.channels, 1),
            )
        self._reset_parameters()

    def _reset_parameters(self):
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() > 1:
                    fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.dim() == 4 else 1)
                    p.copy_(torch.randn(p.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                elif name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    @property
    def stride(self) -> int:
        return self.config.stride

    def forward(self, patches: Tensor) -> Tensor:
        if patches.dim() != 4 or patches.shape[1] != 3:
            raise ValidationError(
                f"expected a (B, 3, H, W) batch, got shape {tuple(patches.shape)}"
            )
        _, _, h, w = patches.shape
        if h % self.stride or w % self.stride:
            raise ValidationError(
                f"patch size {h}x{w} is not divisible by stride {self.stride}"
            )
        return self.body(patches)

    def features(self, patch: Tensor, normalized: bool = False) -> FeatureMap:
        """Single-patch forward returning a FeatureMap."""
        grid = self.forward(patch.unsqueeze(0)).squeeze(0)
        fmap = FeatureMap.from_grid(grid)
        return fmap.normalize() if normalized else fmap


def backbone_forward(backbone: Backbone, patch: Tensor) -> FeatureMap:
    """Functional alias for :meth:`Backbone.features` on a ``(3, H, W)`` patch."""
    return backbone.features(patch)
