"""Three-level feature pyramid: strided conv encoder with top-down lateral fusion."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

from .numeric import upsample


class FeatureConfigError(ValueError):
    pass


class FeaturePyramid(NamedTuple):
    """Per-view features, channels-first: (V, C1, H/4, W/4), (V, C2, H/2, W/2), (V, C3, H, W)."""
    stage1: torch.Tensor
    stage2: torch.Tensor
    stage3: torch.Tensor

    def stage(self, k: int) -> torch.Tensor:
        return self[k - 1]


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect"),
                         nn.ReLU())


class FeaturePyramidNet(nn.Module):
    def __init__(self, channels=(32, 16, 8), base: int = 8, in_channels: int = 3, normalize: bool = True):
        super().__init__()
        self.normalize = normalize
        c1, c2, c3 = channels
        if not c1 > c2 > c3:
            raise FeatureConfigError(f"pyramid channels must decrease with resolution, got {channels}")
        self.channels = tuple(channels)
        self.conv0 = nn.Sequential(_conv(in_channels, base), _conv(base, base))
        self.conv1 = nn.Sequential(_conv(base, 2 * base, stride=2), _conv(2 * base, 2 * base))
        self.conv2 = nn.Sequential(_conv(2 * base, 4 * base, stride=2), _conv(4 * base, 4 * base))
        self.inner1 = nn.Conv2d(2 * base, 4 * base, 1)
        self.inner0 = nn.Conv2d(base, 4 * base, 1)
        self.out1 = nn.Conv2d(4 * base, c1, 1, bias=False)
        self.out2 = nn.Conv2d(4 * base, c2, 3, padding=1, padding_mode="reflect", bias=False)
        self.out3 = nn.Conv2d(4 * base, c3, 3, padding=1, padding_mode="reflect", bias=False)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        """images: (V, 3, H, W) with H and W multiples of 4."""
        H, W = images.shape[-2:]
        if H % 4 or W % 4:
            raise FeatureConfigError(f"image size {H}x{W} must be a multiple of 4 (pad the input)")
        c0 = self.conv0(images)
        c1 = self.conv1(c0)
        c2 = self.conv2(c1)
        s1 = self.out1(c2)
        inner = upsample(c2, 2) + self.inner1(c1)
        s2 = self.out2(inner)
        inner = upsample(inner, 2) + self.inner0(c0)
        s3 = self.out3(inner)
        if not self.normalize:
            return FeaturePyramid(s1, s2, s3)
        return FeaturePyramid(*(_normalize(s) for s in (s1, s2, s3)))


def _normalize(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Zero mean, unit variance per view and channel, so correlations start at order one."""
    return F.instance_norm(x, eps=eps)


def extract(images: torch.Tensor, net: FeaturePyramidNet) -> FeaturePyramid:
    return net(images)
