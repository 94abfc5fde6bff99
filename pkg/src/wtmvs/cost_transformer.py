"""Cost transformer: a 3D shifted-window attention U-Net over the cost volume.

Layout inside the network is channels-last (D, H, W, C). The cost volume
enters as (G, D, H, W) and the probability volume leaves as (D, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .attention import SwinBlockPair


class CtConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CtConfig:
    block: tuple[int, int, int] = (2, 4, 4)
    embed_dim: int = 16
    blocks: int = 3
    window: tuple[int, int, int] = (2, 8, 10)
    heads: int = 2
    merge_depth: bool = True
    out_channels: int = 8
    expansion: str = "linear"  # or "transposed"
    embed_bias: bool = True
    skip_scale: float | None = 4.0  # initial weight on the mean raw correlation; None keeps the default init


def _pad_high(x: torch.Tensor, multiples) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Zero-pad the leading spatial axes of a channels-last tensor up to multiples."""
    n = len(multiples)
    shape = tuple(x.shape[:n])
    target = tuple(math.ceil(s / m) * m for s, m in zip(shape, multiples))
    if target != shape:
        pads = []
        for s, t in reversed(list(zip(shape, target))):
            pads += [0, t - s]
        x = F.pad(x, [0, 0] + pads)
    return x, shape


def fold_blocks(x: torch.Tensor, block) -> torch.Tensor:
    """(D, H, W, C) -> (D/bd, H/bh, W/bw, bd*bh*bw*C); axes must already divide."""
    D, H, W, C = x.shape
    bd, bh, bw = block
    x = x.reshape(D // bd, bd, H // bh, bh, W // bw, bw, C)
    return x.permute(0, 2, 4, 1, 3, 5, 6).reshape(D // bd, H // bh, W // bw, bd * bh * bw * C)


def unfold_blocks(x: torch.Tensor, block, channels: int) -> torch.Tensor:
    """Inverse of :func:`fold_blocks`."""
    d, h, w, _ = x.shape
    bd, bh, bw = block
    x = x.reshape(d, h, w, bd, bh, bw, channels)
    return x.permute(0, 3, 1, 4, 2, 5, 6).reshape(d * bd, h * bh, w * bw, channels)


class BlockEmbed(nn.Module):
    """Cut the volume into non-overlapping blocks, flatten each, project linearly."""

    def __init__(self, in_channels: int, dim: int, block=(2, 4, 4), bias: bool = True):
        super().__init__()
        self.block = tuple(block)
        self.proj = nn.Linear(math.prod(self.block) * in_channels, dim, bias=bias)

    def forward(self, volume: torch.Tensor):
        """volume: (G, D, H, W). Returns ((D', H', W', C'), original (D, H, W))."""
        x, shape = _pad_high(volume.permute(1, 2, 3, 0), self.block)
        return self.proj(fold_blocks(x, self.block)), shape


def block_embed(volume: torch.Tensor, embed: BlockEmbed) -> torch.Tensor:
    return embed(volume)[0]


class PatchMerge(nn.Module):
    def __init__(self, dim: int, factors=(2, 2, 2)):
        super().__init__()
        self.factors = tuple(factors)
        self.norm = nn.LayerNorm(math.prod(self.factors) * dim)
        self.reduce = nn.Linear(math.prod(self.factors) * dim, 2 * dim, bias=False)

    def forward(self, x):
        x, shape = _pad_high(x, self.factors)
        return self.reduce(self.norm(fold_blocks(x, self.factors))), shape


class PatchExpand(nn.Module):
    """Learned upsampling by the merge factors: linear + axis interleave (or a transposed conv)."""

    def __init__(self, dim_in: int, dim_out: int, factors=(2, 2, 2), mode: str = "linear"):
        super().__init__()
        self.factors = tuple(factors)
        self.dim_out = dim_out
        self.mode = mode
        if mode == "linear":
            self.expand = nn.Linear(dim_in, math.prod(self.factors) * dim_out, bias=False)
        elif mode == "transposed":
            self.expand = nn.ConvTranspose3d(dim_in, dim_out, self.factors, stride=self.factors, bias=False)
        else:
            raise CtConfigError(f"unknown expansion mode {mode!r}")

    def forward(self, x, shape):
        if self.mode == "linear":
            y = unfold_blocks(self.expand(x), self.factors, self.dim_out)
        else:
            y = self.expand(x.permute(3, 0, 1, 2).unsqueeze(0))[0].permute(1, 2, 3, 0)
        return y[: shape[0], : shape[1], : shape[2]]


class CostTransformer(nn.Module):
    """Encoder: block embedding, then per level a (W, SW) 3D attention pair and a patch merge.
    Decoder: per level a patch expansion, concatenation with the encoder
    features of that level and a linear fusion. A final expansion restores the
    input resolution, the raw cost volume is concatenated as the outermost skip,
    and a 1x1x1 projection gives one logit per voxel; softmax over depth.
    """

    def __init__(self, in_channels: int, cfg: CtConfig = CtConfig()):
        super().__init__()
        if cfg.blocks < 1:
            raise CtConfigError("the cost transformer needs at least one attention block")
        self.cfg = cfg
        self.in_channels = in_channels
        factors = (2 if cfg.merge_depth else 1, 2, 2)
        self.embed = BlockEmbed(in_channels, cfg.embed_dim, cfg.block, bias=cfg.embed_bias)
        dims = [cfg.embed_dim * 2 ** k for k in range(cfg.blocks + 1)]
        self.encoder = nn.ModuleList([SwinBlockPair(dims[k], cfg.window, cfg.heads * 2 ** k)
                                      for k in range(cfg.blocks)])
        self.merges = nn.ModuleList([PatchMerge(dims[k], factors) for k in range(cfg.blocks)])
        self.expands = nn.ModuleList([PatchExpand(dims[k + 1], dims[k], factors, cfg.expansion)
                                      for k in range(cfg.blocks)])
        self.fuse = nn.ModuleList([nn.Linear(2 * dims[k], dims[k]) for k in range(cfg.blocks)])
        self.out_norm = nn.LayerNorm(cfg.embed_dim)
        self.unembed = PatchExpand(cfg.embed_dim, cfg.out_channels, cfg.block, cfg.expansion)
        self.head = nn.Linear(cfg.out_channels + in_channels, 1)
        if cfg.skip_scale is not None:
            # start from a sharpened softmax of the mean correlation and learn the correction on top
            with torch.no_grad():
                self.head.weight[:, cfg.out_channels:] = cfg.skip_scale / in_channels
                self.head.bias.zero_()

    def logits(self, volume: torch.Tensor) -> torch.Tensor:
        G, D, H, W = volume.shape
        bd, bh, bw = self.cfg.block
        if D < bd or H < bh or W < bw:
            raise CtConfigError(f"cost volume {D}x{H}x{W} is smaller than one embedding block; "
                                f"minimum is {bd}x{bh}x{bw}")
        x, shape = self.embed(volume)
        skips, shapes = [], []
        for pair, merge in zip(self.encoder, self.merges):
            x = pair(x)
            skips.append(x)
            x, s = merge(x)
            shapes.append(s)
        for k in reversed(range(self.cfg.blocks)):
            x = self.expands[k](x, shapes[k])
            x = self.fuse[k](torch.cat([x, skips[k]], dim=-1))
        x = self.unembed(self.out_norm(x), shape)
        x = torch.cat([x, volume.permute(1, 2, 3, 0)], dim=-1)
        return self.head(x)[..., 0]

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(volume), dim=0)


def ct_regularize(volume: torch.Tensor, net: CostTransformer) -> torch.Tensor:
    return net(volume)
