"""Window-based epipolar transformer.

Intra-attention runs (shifted-)window self-attention over each view's
quarter-resolution features. Inter-attention tiles the reference map into
windows, warps each window centre into every source view with the coarse
depth, cuts a same-sized source window around the warped centre, and lets
the source window attend to the reference window. Only source features are
updated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .attention import MASK_VALUE, Mlp, SwinBlockPair, WindowAttention
from .geometry import ViewCamera
from .numeric import DTYPE, bilinear_sample, upsample


class PathwayConfigError(ValueError):
    pass


@dataclass
class SourceWindows:
    centers: np.ndarray    # (M, 2) warped centre (x, y), real-valued
    starts: np.ndarray     # (M, 2) top-left (row, col) of the source window in the padded grid
    in_bounds: np.ndarray  # (M,) warped centre inside the feature grid
    clamped: np.ndarray    # (M,) window had to be moved to stay inside the grid


@dataclass
class EpipolarWindowMap:
    extents: tuple[int, int]
    shape: tuple[int, int]          # unpadded feature grid
    padded: tuple[int, int]
    ref_starts: np.ndarray          # (M, 2) (row, col)
    ref_centers: np.ndarray         # (M, 2) (x, y)
    sources: list[SourceWindows]


def _padded_shape(shape, extents):
    return tuple(max(math.ceil(s / e) * e, e) for s, e in zip(shape, extents))


def reference_windows(shape, extents):
    hp, wp = _padded_shape(shape, extents)
    h, w = extents
    starts = np.array([(r, c) for r in range(0, hp, h) for c in range(0, wp, w)], dtype=np.int64)
    centers = np.stack([starts[:, 1] + w // 2, starts[:, 0] + h // 2], axis=1).astype(np.float64)
    return starts, centers


def warp_window_centers(ref_cam: ViewCamera, src_cam: ViewCamera, coarse_depth: torch.Tensor,
                        extents, ref_centers: np.ndarray | None = None) -> SourceWindows:
    """Warp reference window centres into a source view and anchor source windows on them."""
    shape = tuple(coarse_depth.shape)
    h, w = extents
    hp, wp = _padded_shape(shape, extents)
    if ref_centers is None:
        _, ref_centers = reference_windows(shape, extents)
    cx = torch.as_tensor(np.clip(ref_centers[:, 0], 0, shape[1] - 1), dtype=DTYPE)
    cy = torch.as_tensor(np.clip(ref_centers[:, 1], 0, shape[0] - 1), dtype=DTYPE)
    depth, _ = bilinear_sample(coarse_depth.detach().to(DTYPE).unsqueeze(0), cx, cy)
    depth = depth[0]
    x, y, z = _warp_points(ref_cam, src_cam, torch.as_tensor(ref_centers, dtype=DTYPE), depth)
    centers = torch.stack([x, y], dim=1).numpy()
    in_bounds = ((z.numpy() > 0) & (depth.numpy() > 0) & np.isfinite(centers).all(axis=1)
                 & (centers[:, 0] >= -0.5) & (centers[:, 0] < shape[1] - 0.5)
                 & (centers[:, 1] >= -0.5) & (centers[:, 1] < shape[0] - 0.5))
    safe = np.where(np.isfinite(centers), centers, 0.0)
    raw = np.stack([np.round(safe[:, 1]) - h // 2, np.round(safe[:, 0]) - w // 2], axis=1)
    starts = np.stack([np.clip(raw[:, 0], 0, hp - h), np.clip(raw[:, 1], 0, wp - w)], axis=1)
    clamped = (starts != raw).any(axis=1)
    return SourceWindows(centers, starts.astype(np.int64), in_bounds, clamped)


def _warp_points(ref: ViewCamera, src: ViewCamera, pix: torch.Tensor, depth: torch.Tensor):
    K_r, R_r, t_r = ref.tensors()
    K_s, R_s, t_s = src.tensors()
    rays = torch.cat([pix, torch.ones_like(pix[:, :1])], dim=1) @ torch.linalg.inv(K_r).T
    Xw = (rays * depth[:, None] - t_r) @ R_r
    uvw = (Xw @ R_s.T + t_s) @ K_s.T
    z = uvw[:, 2]
    safe = torch.where(z > 1e-12, z, torch.ones_like(z))
    return uvw[:, 0] / safe, uvw[:, 1] / safe, z


def build_window_map(ref_cam, src_cams, coarse_depth, extents) -> EpipolarWindowMap:
    shape = tuple(coarse_depth.shape)
    starts, centers = reference_windows(shape, extents)
    sources = [warp_window_centers(ref_cam, s, coarse_depth, extents, centers) for s in src_cams]
    return EpipolarWindowMap(tuple(extents), shape, _padded_shape(shape, extents), starts, centers, sources)


class CrossWindowBlock(nn.Module):
    """src = src + Attn(LN(src), LN(ref)); src = src + MLP(LN(src))."""

    def __init__(self, dim: int, extents, heads: int, mlp_ratio: float = 4.0, rel_bias: bool = True):
        super().__init__()
        self.extents = tuple(extents)
        self.norm_q = nn.LayerNorm(dim, eps=1e-5)
        self.norm_kv = nn.LayerNorm(dim, eps=1e-5)
        self.attn = WindowAttention(dim, extents, heads, rel_bias=rel_bias)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, src_tokens, ref_tokens, key_mask=None, extents=None):
        x = src_tokens + self.attn(self.norm_q(src_tokens), self.norm_kv(ref_tokens), mask=key_mask,
                                   extents=extents)
        return x + self.mlp(self.norm2(x))


def _pad_to(feat: torch.Tensor, padded) -> torch.Tensor:
    h, w = feat.shape[-2:]
    return F.pad(feat, [0, padded[1] - w, 0, padded[0] - h])


def inter_attention(ref_feat: torch.Tensor, src_feats: torch.Tensor, wmap: EpipolarWindowMap,
                    block: CrossWindowBlock) -> torch.Tensor:
    """Update source features (S, C, H, W) from the reference map (C, H, W).

    Window pairs whose warped centre falls outside the source grid are
    skipped. Overlapping source windows are applied one after another in
    reference-window order, each reading the features the previous one wrote.
    """
    h, w = wmap.extents
    H, W = wmap.shape
    ref_p = _pad_to(ref_feat, wmap.padded)
    C = ref_feat.shape[0]
    T = h * w
    out = []
    for s, sw in enumerate(wmap.sources):
        cur = _pad_to(src_feats[s], wmap.padded)
        for j, (r0, c0) in enumerate(wmap.ref_starts):
            if not sw.in_bounds[j]:
                continue
            ref_tok = ref_p[:, r0:r0 + h, c0:c0 + w].reshape(C, T).T.unsqueeze(0)
            rows = torch.arange(r0, r0 + h).repeat_interleave(w)
            cols = torch.arange(c0, c0 + w).repeat(h)
            key_pad = (rows >= H) | (cols >= W)
            mask = None
            if bool(key_pad.any()):
                mask = torch.zeros(1, T, T, dtype=DTYPE).masked_fill(key_pad.view(1, 1, T), MASK_VALUE)
            sr, sc = (int(v) for v in sw.starts[j])
            src_tok = cur[:, sr:sr + h, sc:sc + w].clone().reshape(C, T).T.unsqueeze(0)
            upd = block(src_tok, ref_tok, mask, wmap.extents)[0].T.reshape(C, h, w)
            cur = cur.clone()
            cur[:, sr:sr + h, sc:sc + w] = upd
        out.append(cur[:, :H, :W])
    return torch.stack(out) if out else src_feats


class WindowEpipolarTransformer(nn.Module):
    def __init__(self, dim: int, extents=(16, 16), heads: int = 2, blocks: int = 1, inter_passes: int = 1,
                 cross_bias: bool = True):
        super().__init__()
        self.extents = tuple(extents)
        self.intra = nn.ModuleList([SwinBlockPair(dim, extents, heads) for _ in range(blocks)])
        self.inter = nn.ModuleList([CrossWindowBlock(dim, extents, heads, rel_bias=cross_bias)
                                    for _ in range(inter_passes)])

    def intra_attention(self, feats: torch.Tensor) -> torch.Tensor:
        """feats: (V, C, H, W), each view processed independently with shared weights."""
        out = []
        for f in feats:
            x = f.permute(1, 2, 0)
            for pair in self.intra:
                x = pair(x)
            out.append(x.permute(2, 0, 1))
        return torch.stack(out)

    def forward(self, feats: torch.Tensor, cams: list[ViewCamera], coarse_depth: torch.Tensor):
        """feats (V, C, H, W) with view 0 the reference; cams at the features' resolution."""
        feats = self.intra_attention(feats)
        ext = tuple(min(e, s) for e, s in zip(self.extents, feats.shape[-2:]))
        wmap = build_window_map(cams[0], cams[1:], coarse_depth, ext)
        ref, src = feats[0], feats[1:]
        for block in self.inter:
            src = inter_attention(ref, src, wmap, block)
        return torch.cat([ref.unsqueeze(0), src]), wmap


class FeaturePathway(nn.Module):
    """Add upsampled transformed quarter-resolution features to the finer pyramid levels."""

    def __init__(self, c1: int, c2: int, c3: int, project: bool = True):
        super().__init__()
        if not project and not c1 == c2 == c3:
            raise PathwayConfigError(f"channels {c1}/{c2}/{c3} differ; a projection is required")
        self.to2 = nn.Conv2d(c1, c2, 1, bias=False) if project else nn.Identity()
        self.to3 = nn.Conv2d(c1, c3, 1, bias=False) if project else nn.Identity()

    def forward(self, transformed, stage2, stage3):
        s2 = stage2 + self.to2(upsample(transformed, 2, stage2.shape[-2:]))
        s3 = stage3 + self.to3(upsample(transformed, 4, stage3.shape[-2:]))
        return s2, s3


def feature_pathway(transformed, stage2, stage3, pathway: FeaturePathway):
    return pathway(transformed, stage2, stage3)
