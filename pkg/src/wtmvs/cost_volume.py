"""Depth hypotheses, group-wise correlation cost volumes and depth readout."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import ViewCamera, warp_features_at_depths
from .numeric import DTYPE, upsample


class CostVolumeConfigError(ValueError):
    pass


DEFAULT_COUNTS = (48, 32, 8)
DEFAULT_FACTORS = (0.25, 0.5)


@dataclass
class DepthHypotheses:
    values: torch.Tensor  # (D, H, W), strictly increasing along D
    stage: int
    interval: float

    @property
    def count(self) -> int:
        return self.values.shape[0]


def stage_interval(stage: int, depth_range, counts=DEFAULT_COUNTS, factors=DEFAULT_FACTORS,
                   mode: str = "successive") -> float:
    """Spacing between hypotheses at ``stage`` (1-based).

    ``successive``: each factor scales the previous stage's spacing.
    ``relative``: each factor scales the stage-1 spacing.
    """
    d_min, d_max = depth_range
    base = (d_max - d_min) / (counts[0] - 1)
    if stage == 1:
        return base
    if mode == "successive":
        out = base
        for f in factors[:stage - 1]:
            out *= f
        return out
    if mode == "relative":
        return base * factors[stage - 2]
    raise CostVolumeConfigError(f"unknown interval mode {mode!r}")


def generate_hypotheses(stage: int, depth_range, shape, prev_depth: torch.Tensor | None = None,
                        counts=DEFAULT_COUNTS, factors=DEFAULT_FACTORS,
                        mode: str = "successive") -> DepthHypotheses:
    """Stage 1: ``counts[0]`` evenly spaced depths covering the range, endpoints included.
    Later stages: ``counts[k]`` depths centred on the (upsampled) previous estimate,
    shifted as a block where needed to stay inside the range.
    """
    H, W = shape
    d_min, d_max = (float(v) for v in depth_range)
    D = counts[stage - 1]
    interval = stage_interval(stage, depth_range, counts, factors, mode)
    if stage == 1:
        values = torch.linspace(d_min, d_max, D, dtype=DTYPE).view(D, 1, 1).expand(D, H, W).clone()
        return DepthHypotheses(values, 1, interval)
    if prev_depth is None:
        raise CostVolumeConfigError(f"stage {stage} hypotheses need the previous stage's depth")
    prev = prev_depth.detach().to(DTYPE)
    if tuple(prev.shape) != (H, W):
        factor = H // prev.shape[0]
        prev = upsample(prev, factor, (H, W))
    prev = prev.clamp(d_min, d_max)
    span = (D - 1) * interval
    start = prev - span / 2
    start = torch.minimum(torch.clamp(start, min=d_min), torch.full_like(start, d_max - span))
    steps = torch.arange(D, dtype=DTYPE).view(D, 1, 1) * interval
    return DepthHypotheses(start.unsqueeze(0) + steps, stage, interval)


def build_cost_volume(ref_feat: torch.Tensor, src_feats: torch.Tensor, ref_cam: ViewCamera,
                      src_cams: list[ViewCamera], hyps: DepthHypotheses | torch.Tensor,
                      groups: int = 4) -> torch.Tensor:
    """(G, D, H, W) group-wise correlation averaged over source views.

    For group g the score is the mean over that group's channels of
    ref * warped_src. Source views whose warp leaves the image at a
    (depth, pixel) contribute nothing there; the average is over the views
    that do contribute.
    """
    C, H, W = ref_feat.shape
    if C % groups:
        raise CostVolumeConfigError(f"{groups} groups do not divide {C} channels")
    depth = hyps.values if isinstance(hyps, DepthHypotheses) else hyps
    D = depth.shape[0]
    total = torch.zeros(groups, D, H, W, dtype=ref_feat.dtype)
    count = torch.zeros(D, H, W, dtype=ref_feat.dtype)
    for feat, cam in zip(src_feats, src_cams):
        warped, mask = warp_features_at_depths(feat, ref_cam, cam, depth)
        corr = (warped * ref_feat.unsqueeze(1)).view(groups, C // groups, D, H, W).mean(dim=1)
        m = mask.to(ref_feat.dtype)
        total = total + corr * m
        count = count + m
    return total / count.clamp(min=1.0)


def to_depth(prob: torch.Tensor, hyps: DepthHypotheses | torch.Tensor, mode: str = "winner_take_all"):
    """Depth and confidence (max probability) from a (D, H, W) probability volume.

    Winner-take-all ties resolve to the lowest hypothesis index.
    """
    depth = hyps.values if isinstance(hyps, DepthHypotheses) else hyps
    conf, idx = prob.max(dim=0)
    if mode == "winner_take_all":
        # torch.max does not promise which index wins a tie; argmax of the first maximum does
        idx = (prob == conf.unsqueeze(0)).to(torch.int8).argmax(dim=0)
        return depth.gather(0, idx.unsqueeze(0))[0], conf
    if mode == "expectation":
        return (prob * depth).sum(dim=0), conf
    raise CostVolumeConfigError(f"unknown depth mode {mode!r}")
