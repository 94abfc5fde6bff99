"""Cross-entropy depth supervision, geometric consistency loss, and their weighted sum."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .cost_volume import DepthHypotheses
from .geometry import DepthSource, ViewCamera, reprojection_errors


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 100.0
    lambda1: float = 2.0
    lambda2: float = 1.0
    tau1: tuple[float, ...] = (3.0, 2.0, 1.0)
    tau2: tuple[float, ...] = (0.1, 0.05, 0.01)
    set_mode: str = "intersection"  # or "literal_union"

    def __post_init__(self):
        vals = [self.gamma, self.lambda1, *self.tau1, *self.tau2]
        if any(v <= 0 for v in vals) or self.lambda2 < 0:
            raise ValueError("loss weights and thresholds must be positive")
        if any(a < b for a, b in zip(self.tau1, self.tau1[1:])) or \
                any(a < b for a, b in zip(self.tau2, self.tau2[1:])):
            raise ValueError("reprojection thresholds must not grow with the stage")
        if self.set_mode not in ("intersection", "literal_union"):
            raise ValueError(f"unknown set mode {self.set_mode!r}")


def ce_loss(prob: torch.Tensor, gt_depth: torch.Tensor, hyps: DepthHypotheses | torch.Tensor,
            valid: torch.Tensor) -> torch.Tensor:
    """Mean of -log P[target] over valid pixels, the target being the hypothesis
    nearest the ground truth. Pixels whose ground truth lies outside the
    hypothesis span are left out."""
    depth = hyps.values if isinstance(hyps, DepthHypotheses) else hyps
    inside = (gt_depth >= depth[0]) & (gt_depth <= depth[-1])
    mask = valid & inside
    if not bool(mask.any()):
        raise EmptyMaskError("no valid pixel falls inside the hypothesis range")
    target = (depth - gt_depth.unsqueeze(0)).abs().argmin(dim=0)
    p = prob.gather(0, target.unsqueeze(0))[0]
    nll = -torch.log(p.clamp_min(1e-300))
    return nll[mask].mean()


@dataclass
class GeoLossResult:
    loss: torch.Tensor
    selected: torch.Tensor  # pixel set the loss was taken over
    empty: bool = False


def geo_loss(depth: torch.Tensor, gt_src_depths: list[DepthSource], ref_cam: ViewCamera,
             src_cams: list[ViewCamera], cfg: LossConfig, stage: int,
             valid: torch.Tensor | None = None, src_sampling: str = "nearest") -> GeoLossResult:
    """Sigmoid of the combined reprojection error xi_p + gamma * xi_d, averaged over
    the selected pixels.

    Per pixel the error is taken from the most consistent source view. With
    ``intersection`` the pixel set is the valid mask restricted to pixels with
    xi_p < tau1 and xi_d < tau2 for that view; ``literal_union`` uses the union
    of the valid mask and the under-threshold set.
    """
    if not src_cams:
        raise ValueError("geometric consistency needs at least one source view")
    t1, t2 = cfg.tau1[stage - 1], cfg.tau2[stage - 1]
    if valid is None:
        valid = depth.detach() > 0
    inf = torch.tensor(float("inf"), dtype=depth.dtype)
    best_any = torch.full_like(depth, float("inf"))
    best_ok = torch.full_like(depth, float("inf"))
    for src_depth, cam in zip(gt_src_depths, src_cams):
        xi_p, xi_d, ok = reprojection_errors(depth, src_depth, ref_cam, cam, src_sampling)
        err = xi_p + cfg.gamma * xi_d
        e_any = torch.where(ok, err, inf)
        under = ok & (xi_p.detach() < t1) & (xi_d.detach() < t2)
        e_ok = torch.where(under, err, inf)
        best_any = torch.where(e_any < best_any, e_any, best_any)
        best_ok = torch.where(e_ok < best_ok, e_ok, best_ok)
    good = torch.isfinite(best_ok.detach())
    if cfg.set_mode == "intersection":
        selected = valid & good
        err = best_ok
    else:
        selected = (valid | good) & torch.isfinite(best_any.detach())
        err = best_any
    if not bool(selected.any()):
        warnings.warn("geometric consistency loss: empty pixel set", RuntimeWarning)
        return GeoLossResult(depth.sum() * 0.0, selected, empty=True)
    return GeoLossResult(torch.sigmoid(err[selected]).mean(), selected)


def total_loss(ce: list, geo: list, cfg: LossConfig) -> torch.Tensor:
    """sum_k lambda1 * CE_k + lambda2 * Geo_k over the cascade stages."""
    out = 0.0
    for c, g in zip(ce, geo):
        out = out + cfg.lambda1 * c + cfg.lambda2 * g
    return out
