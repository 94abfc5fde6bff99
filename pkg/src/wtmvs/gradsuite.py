"""Finite-difference checks for every differentiable building block.

Each case builds a small random instance from a seed and returns the function
under test together with its inputs; ``run_suite`` checks the autograd
gradient of every case against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import torch
from torch import nn

from .attention import SwinBlock, SwinBlockPair, WindowAttention
from .cost_transformer import CostTransformer, CtConfig
from .cost_volume import build_cost_volume, generate_hypotheses
from .losses import LossConfig, ce_loss, geo_loss
from .numeric import DTYPE, GradCheckReport, finite_difference_check
from .scenes import SceneSpec, generate
from .wet import CrossWindowBlock, build_window_map, inter_attention


def _randomize(module: nn.Module, gen: torch.Generator, scale: float = 0.3) -> nn.Module:
    """Double precision with every parameter redrawn, bias tables included."""
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * scale)
    return module


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def case_window_attention(seed):
    g = _gen(seed)
    shifted = seed % 2 == 1
    if seed % 4 < 2:
        block = SwinBlock(4, (3, 3), 2, shifted=shifted)
        x = torch.randn(5, 7, 4, generator=g, dtype=DTYPE)
    else:
        block = SwinBlock(4, (2, 2, 3), 2, shifted=shifted)
        x = torch.randn(3, 4, 5, 4, generator=g, dtype=DTYPE)
    _randomize(block, g)
    return block, [x]


def case_attention_pair(seed):
    g = _gen(seed)
    pair = _randomize(SwinBlockPair(4, (2, 3, 3), 2), g)
    return pair, [torch.randn(2, 4, 5, 4, generator=g, dtype=DTYPE)]


def case_cross_attention(seed):
    g = _gen(seed)
    attn = _randomize(WindowAttention(4, (2, 3), 2), g)
    x = torch.randn(2, 6, 4, generator=g, dtype=DTYPE)
    ctx = torch.randn(2, 6, 4, generator=g, dtype=DTYPE)
    return (lambda a, b: attn(a, b)), [x, ctx]


@lru_cache(maxsize=None)
def _scene(geometry: str = "plane"):
    return generate(SceneSpec(geometry=geometry, height=32, width=40, focal=40.0, depth_range=(2.0, 8.0)), 0)


def _stage_cams(scale):
    return [c.scaled(scale) for c in _scene().cams]


def case_wet_inter(seed):
    g = _gen(seed)
    scene = _scene()
    cams = _stage_cams(0.25)
    depth = torch.as_tensor(scene.depths[0][::4, ::4], dtype=DTYPE)
    wmap = build_window_map(cams[0], cams[1:], depth, (4, 4))
    block = _randomize(CrossWindowBlock(4, (4, 4), 2), g)
    ref = torch.randn(4, 8, 10, generator=g, dtype=DTYPE)
    src = torch.randn(2, 4, 8, 10, generator=g, dtype=DTYPE)
    wmap.sources = wmap.sources[:2]
    return (lambda r, s: inter_attention(r, s, wmap, block)), [ref, src]


def case_cost_volume(seed):
    g = _gen(seed)
    cams = _stage_cams(0.25)
    hyps = generate_hypotheses(1, cams[0].depth_range, (8, 10), counts=(6, 4, 2))
    # a small random offset keeps sample positions off the integer lattice
    hyps.values.add_(torch.rand(hyps.values.shape, generator=g, dtype=DTYPE) * 0.05)
    ref = torch.randn(4, 8, 10, generator=g, dtype=DTYPE)
    src = torch.randn(2, 4, 8, 10, generator=g, dtype=DTYPE)
    return (lambda r, s: build_cost_volume(r, s, cams[0], cams[1:3], hyps, groups=2)), [ref, src]


def case_cost_transformer(seed):
    g = _gen(seed)
    cfg = CtConfig(block=(2, 2, 2), embed_dim=4, blocks=1, window=(2, 2, 2), heads=1, out_channels=2,
                   expansion="transposed" if seed % 2 else "linear")
    net = _randomize(CostTransformer(2, cfg), g)
    return net, [torch.randn(2, 4, 4, 6, generator=g, dtype=DTYPE)]


def case_ce_loss(seed):
    g = _gen(seed)
    D = (8, 32, 48)[seed % 3]
    hyps = torch.linspace(2.0, 8.0, D, dtype=DTYPE).view(D, 1, 1).expand(D, 4, 5)
    gt = 2.0 + 6.0 * torch.rand(4, 5, generator=g, dtype=DTYPE)
    valid = torch.rand(4, 5, generator=g) > 0.2
    valid[0, 0] = True

    def fn(logits):
        return ce_loss(torch.softmax(logits, dim=0), gt, hyps, valid)
    return fn, [torch.randn(D, 4, 5, generator=g, dtype=DTYPE)]


def case_geo_loss(seed):
    g = _gen(seed)
    scene = _scene(("plane", "sphere", "step")[seed % 3])
    stage = 1 + seed % 3
    step = (4, 2, 1)[stage - 1]
    cams = [c.scaled(1 / step) for c in scene.cams]
    gt = torch.as_tensor(scene.depths[:, ::step, ::step], dtype=DTYPE)
    h, w = gt.shape[-2:]
    depth = gt[0] * (1 + 0.002 * torch.randn(h, w, generator=g, dtype=DTYPE))
    cfg = LossConfig(set_mode="literal_union" if seed % 2 else "intersection")

    def fn(d):
        return geo_loss(d, list(gt[1:]), cams[0], cams[1:], cfg, stage,
                        src_sampling="bilinear").loss
    return fn, [depth]


CASES = {
    "window_attention": case_window_attention,
    "attention_pair": case_attention_pair,
    "cross_attention": case_cross_attention,
    "wet_inter_attention": case_wet_inter,
    "cost_volume": case_cost_volume,
    "cost_transformer": case_cost_transformer,
    "ce_loss": case_ce_loss,
    "geo_loss": case_geo_loss,
}


@dataclass
class CaseResult:
    name: str
    reports: list[GradCheckReport]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports) and all(r.checked for r in self.reports)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.reports)

    def summary(self) -> str:
        checked = sum(len(r.checked) for r in self.reports)
        excluded = sum(len(r.excluded) for r in self.reports)
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: {len(self.reports)} instances, "
                f"max_rel={self.max_rel_error:.2e}, checked={checked}, excluded={excluded}, "
                f"{self.seconds:.1f}s")


def run_case(name: str, instances: int = 10, max_coords: int = 24, step: float = 1e-5,
             tolerance: float = 1e-4, seed: int = 0) -> CaseResult:
    t0 = time.perf_counter()
    reports = []
    for i in range(instances):
        fn, inputs = CASES[name](seed + i)
        reports.append(finite_difference_check(fn, inputs, step=step, tolerance=tolerance,
                                               max_coords=max_coords, seed=seed + i))
    return CaseResult(name, reports, time.perf_counter() - t0)


def run_suite(instances: int = 10, max_coords: int = 24, seed: int = 0, names=None) -> list[CaseResult]:
    return [run_case(n, instances, max_coords, seed=seed) for n in (names or CASES)]

