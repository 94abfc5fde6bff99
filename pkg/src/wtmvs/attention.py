"""Window multi-head attention for 2D feature maps and 3D volumes.

Tensors are channels-last: a 2D map is (H, W, C), a volume is (D, H, W, C).
Windows are flattened to (num_windows, tokens, C). Shifted windows use a
cyclic roll plus an additive mask so that tokens only attend to tokens that
were neighbours before the roll; zero padding up to a multiple of the window
is masked out of every softmax and cropped afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .numeric import DTYPE

MASK_VALUE = -1e9


class AttentionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    extents: tuple[int, ...]
    shift: tuple[int, ...] | None = None

    def __post_init__(self):
        ext = tuple(int(e) for e in self.extents)
        shift = tuple(0 for _ in ext) if self.shift is None else tuple(int(s) for s in self.shift)
        if len(ext) not in (2, 3) or len(shift) != len(ext):
            raise AttentionConfigError("windows are 2D or 3D")
        if any(e < 1 for e in ext) or any(not 0 <= s < e for s, e in zip(shift, ext)):
            raise AttentionConfigError(f"bad window {ext} / shift {shift}")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "shift", shift)

    @property
    def dims(self) -> int:
        return len(self.extents)

    @property
    def tokens(self) -> int:
        return math.prod(self.extents)

    def fitted(self, shape, shifted: bool) -> "WindowSpec":
        """Clamp extents to the grid; shift by half a window where the axis holds more than one window."""
        ext = tuple(min(e, s) for e, s in zip(self.extents, shape))
        sh = tuple((e // 2 if shifted and e < s else 0) for e, s in zip(ext, shape))
        return WindowSpec(ext, sh)


@dataclass
class WindowLayout:
    shape: tuple[int, ...]
    padded: tuple[int, ...]
    spec: WindowSpec
    counts: tuple[int, ...]
    mask: torch.Tensor | None  # (num_windows, T, T) additive, or None

    @property
    def num_windows(self) -> int:
        return math.prod(self.counts)


def _window_view(x: torch.Tensor, counts, extents) -> torch.Tensor:
    n = len(extents)
    C = x.shape[-1]
    split = []
    for c, e in zip(counts, extents):
        split += [c, e]
    x = x.reshape(*split, C)
    order = [2 * i for i in range(n)] + [2 * i + 1 for i in range(n)] + [2 * n]
    return x.permute(*order).reshape(math.prod(counts), math.prod(extents), C)


def _token_groups(shape, padded, spec: WindowSpec, counts) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token group label and padding flag, laid out like the windows."""
    n = spec.dims
    grids = torch.meshgrid(*[torch.arange(p) for p in padded], indexing="ij")
    label = torch.zeros(padded, dtype=torch.long)
    pad = torch.zeros(padded, dtype=torch.bool)
    for axis in range(n):
        # tokens that wrapped around during the roll form their own group
        label = label * 2 + (grids[axis] < spec.shift[axis]).long()
        pad = pad | (grids[axis] >= shape[axis])
    if any(spec.shift):
        label = torch.roll(label, shifts=[-s for s in spec.shift], dims=list(range(n)))
        pad = torch.roll(pad, shifts=[-s for s in spec.shift], dims=list(range(n)))
    label = _window_view(label.unsqueeze(-1), counts, spec.extents)[..., 0]
    pad = _window_view(pad.unsqueeze(-1), counts, spec.extents)[..., 0]
    return label, pad


def partition_windows(x: torch.Tensor, spec: WindowSpec):
    """Split a channels-last grid into flattened windows.

    Returns ``(windows, layout)``; :func:`merge_windows` inverts it bit-exactly.
    """
    n = spec.dims
    shape = tuple(x.shape[:n])
    padded = tuple(math.ceil(s / e) * e for s, e in zip(shape, spec.extents))
    counts = tuple(p // e for p, e in zip(padded, spec.extents))
    if padded != shape:
        pads = []
        for s, p in reversed(list(zip(shape, padded))):
            pads += [0, p - s]
        x = F.pad(x, [0, 0] + pads)
    if any(spec.shift):
        x = torch.roll(x, shifts=[-s for s in spec.shift], dims=list(range(n)))
    windows = _window_view(x, counts, spec.extents)

    mask = None
    if any(spec.shift) or padded != shape:
        label, pad = _token_groups(shape, padded, spec, counts)
        allowed = (label[:, :, None] == label[:, None, :]) & ~pad[:, None, :]
        mask = torch.zeros(allowed.shape, dtype=DTYPE).masked_fill(~allowed, MASK_VALUE)
    return windows, WindowLayout(shape, padded, spec, counts, mask)


def merge_windows(windows: torch.Tensor, layout: WindowLayout) -> torch.Tensor:
    spec, counts = layout.spec, layout.counts
    n = spec.dims
    C = windows.shape[-1]
    x = windows.reshape(*counts, *spec.extents, C)
    order = []
    for i in range(n):
        order += [i, n + i]
    x = x.permute(*order, 2 * n).reshape(*layout.padded, C)
    if any(spec.shift):
        x = torch.roll(x, shifts=list(spec.shift), dims=list(range(n)))
    return x[tuple(slice(0, s) for s in layout.shape)]


def relative_position_index(extents, table_extents=None) -> torch.Tensor:
    """(T, T) index into a bias table laid out for ``table_extents`` (defaults to ``extents``)."""
    table_extents = tuple(extents) if table_extents is None else tuple(table_extents)
    coords = torch.stack(torch.meshgrid(*[torch.arange(e) for e in extents], indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    idx = torch.zeros(rel.shape[1:], dtype=torch.long)
    for axis, e in enumerate(table_extents):
        idx = idx * (2 * e - 1) + rel[axis] + e - 1
    return idx


def scaled_dot_attention(q, k, v, bias=None, mask=None):
    """softmax(q k^T / sqrt(d) + bias + mask) v over the last two axes."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = logits + mask
    return torch.softmax(logits, dim=-1) @ v


class WindowAttention(nn.Module):
    """Multi-head attention inside windows with a learned relative position bias.

    ``forward(x)`` is self-attention; ``forward(x, context)`` takes queries
    from ``x`` and keys/values from ``context`` (same token count).
    """

    def __init__(self, dim: int, extents, heads: int, head_dim: int | None = None,
                 rel_bias: bool = True, qkv_bias: bool = True, bias_init_std: float = 0.0):
        super().__init__()
        head_dim = dim // heads if head_dim is None else head_dim
        if heads * head_dim != dim:
            raise AttentionConfigError(f"heads*head_dim = {heads * head_dim} != channels {dim}")
        self.dim, self.heads, self.head_dim = dim, heads, head_dim
        self.extents = tuple(extents)
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.k = nn.Linear(dim, dim, bias=qkv_bias)
        self.v = nn.Linear(dim, dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = rel_bias
        if rel_bias:
            table = torch.zeros(math.prod(2 * e - 1 for e in self.extents), heads)
            if bias_init_std > 0:
                nn.init.trunc_normal_(table, std=bias_init_std)
            self.bias_table = nn.Parameter(table)
        self._index_cache: dict = {}

    def position_bias(self, extents) -> torch.Tensor:
        extents = tuple(extents)
        if extents not in self._index_cache:
            self._index_cache[extents] = relative_position_index(extents, self.extents)
        idx = self._index_cache[extents]
        return self.bias_table[idx.reshape(-1)].reshape(idx.shape[0], idx.shape[1], self.heads).permute(2, 0, 1)

    def _heads(self, t):
        nw, T, _ = t.shape
        return t.reshape(nw, T, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, mask=None, extents=None):
        if x.shape[-1] != self.dim:
            raise AttentionConfigError(f"expected {self.dim} channels, got {x.shape[-1]}")
        context = x if context is None else context
        q, k, v = self._heads(self.q(x)), self._heads(self.k(context)), self._heads(self.v(context))
        bias = None
        if self.rel_bias and x.shape[1] == context.shape[1]:
            bias = self.position_bias(self.extents if extents is None else extents).unsqueeze(0)
        if mask is not None:
            mask = mask.unsqueeze(1)
        out = scaled_dot_attention(q, k, v, bias, mask)
        nw, _, T, _ = out.shape
        return self.proj(out.transpose(1, 2).reshape(nw, T, self.dim))


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float = 4.0):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class SwinBlock(nn.Module):
    """One (shifted) window attention block with pre-norm residuals:

    z_hat = MSA(LN(z)) + z;  z_out = MLP(LN(z_hat)) + z_hat
    """

    def __init__(self, dim: int, extents, heads: int, shifted: bool = False, mlp_ratio: float = 4.0,
                 rel_bias: bool = True):
        super().__init__()
        self.extents = tuple(extents)
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.attn = WindowAttention(dim, extents, heads, rel_bias=rel_bias)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        n = len(self.extents)
        spec = WindowSpec(self.extents).fitted(x.shape[:n], self.shifted)
        windows, layout = partition_windows(self.norm1(x), spec)
        attended = self.attn(windows, mask=layout.mask, extents=spec.extents)
        x = x + merge_windows(attended, layout)
        return x + self.mlp(self.norm2(x))


class SwinBlockPair(nn.Module):
    """Regular-window block followed by a shifted-window block."""

    def __init__(self, dim: int, extents, heads: int, mlp_ratio: float = 4.0, rel_bias: bool = True):
        super().__init__()
        self.regular = SwinBlock(dim, extents, heads, shifted=False, mlp_ratio=mlp_ratio, rel_bias=rel_bias)
        self.shifted = SwinBlock(dim, extents, heads, shifted=True, mlp_ratio=mlp_ratio, rel_bias=rel_bias)

    def forward(self, x):
        return self.shifted(self.regular(x))


def swin_block_pair(grid: torch.Tensor, pair: SwinBlockPair) -> torch.Tensor:
    return pair(grid)


def zero_(module: nn.Module) -> nn.Module:
    """Zero every linear weight/bias and bias table, leaving LayerNorms at identity."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.zeros_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        if isinstance(m, WindowAttention) and m.rel_bias:
            nn.init.zeros_(m.bias_table)
    return module
