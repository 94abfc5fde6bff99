"""Cost-volume regularizers compared in the ablation: none, 2D CNN, 3D CNN and CT.

Every regularizer maps a (G, D, H, W) cost volume to a (D, H, W) probability
volume normalised over depth.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .cost_transformer import CostTransformer, CtConfig

KINDS = ("none", "conv2d", "conv3d", "ct")


class NoRegularizer(nn.Module):
    """Softmax over depth of the group-averaged correlation times a learned inverse temperature."""

    def __init__(self, scale: float = 4.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(scale)))

    def forward(self, volume):
        return torch.softmax(self.scale * volume.mean(dim=0), dim=0)


class Conv2dRegularizer(nn.Module):
    """The same small 2D conv stack applied to every depth slice independently."""

    def __init__(self, groups: int, width: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(groups, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 1, 3, padding=1))

    def forward(self, volume):
        G, D, H, W = volume.shape
        logits = self.net(volume.permute(1, 0, 2, 3))[:, 0]
        return torch.softmax(logits, dim=0)


class Conv3dRegularizer(nn.Module):
    """Two-level 3D U-Net."""

    def __init__(self, groups: int, width: int = 8):
        super().__init__()
        self.enc0 = nn.Sequential(nn.Conv3d(groups, width, 3, padding=1), nn.ReLU())
        self.down = nn.Sequential(nn.Conv3d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
                                  nn.Conv3d(2 * width, 2 * width, 3, padding=1), nn.ReLU())
        self.up = nn.ConvTranspose3d(2 * width, width, 3, stride=2, padding=1, output_padding=1)
        self.out = nn.Conv3d(width, 1, 3, padding=1)

    def forward(self, volume):
        G, D, H, W = volume.shape
        x = F.pad(volume, [0, W % 2, 0, H % 2, 0, D % 2]).unsqueeze(0)
        e0 = self.enc0(x)
        x = F.relu(self.up(self.down(e0)) + e0)
        logits = self.out(x)[0, 0, :D, :H, :W]
        return torch.softmax(logits, dim=0)


def make_regularizer(kind: str, groups: int, ct: CtConfig | None = None) -> nn.Module:
    if kind == "none":
        return NoRegularizer()
    if kind == "conv2d":
        return Conv2dRegularizer(groups)
    if kind == "conv3d":
        return Conv3dRegularizer(groups)
    if kind == "ct":
        return CostTransformer(groups, ct or CtConfig())
    raise ValueError(f"unknown regularizer {kind!r}; choose from {KINDS}")


def alternative_regularizers(volume: torch.Tensor, kind: str, groups: int | None = None) -> torch.Tensor:
    """One-shot helper: build a fresh double-precision regularizer and apply it."""
    net = make_regularizer(kind, volume.shape[0] if groups is None else groups).double()
    return net(volume)
