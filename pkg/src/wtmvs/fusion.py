"""Multi-view consistency filtering, depth-map fusion and point-cloud metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import ViewCamera, backproject, reprojection_errors, warp_to_source
from .io import write_json, write_kv
from .numeric import DTYPE, nearest_sample


@dataclass
class PointCloud:
    points: np.ndarray               # (N, 3)
    views: np.ndarray | None = None  # (N,) source view id

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class FilterThresholds:
    theta_p: float = 1.0
    theta_d: float = 0.01
    n_min: int = 2
    c_min: float = 0.3


def _t(a) -> torch.Tensor:
    return a.to(DTYPE) if torch.is_tensor(a) else torch.as_tensor(np.asarray(a, dtype=np.float64))


def consistency_counts(depths, cams: list[ViewCamera], thresholds: FilterThresholds = FilterThresholds()):
    """Per view, the boolean stack (V, H, W) of which other views agree with each pixel."""
    depths = [_t(d) for d in depths]
    out = []
    for r, (dr, cr) in enumerate(zip(depths, cams)):
        agree = torch.zeros((len(cams),) + tuple(dr.shape), dtype=torch.bool)
        for s, (ds, cs) in enumerate(zip(depths, cams)):
            if s == r:
                continue
            xi_p, xi_d, ok = reprojection_errors(dr, ds, cr, cs)
            agree[s] = ok & (xi_p < thresholds.theta_p) & (xi_d < thresholds.theta_d)
        out.append(agree)
    return out


def consistency_filter(depths, confidences, cams: list[ViewCamera],
                       thresholds: FilterThresholds = FilterThresholds()) -> list[np.ndarray]:
    """A pixel survives when its confidence is at least ``c_min`` and at least
    ``n_min`` other views agree with it within (theta_p, theta_d)."""
    masks = []
    for agree, d, c in zip(consistency_counts(depths, cams, thresholds), depths, confidences):
        n = agree.sum(dim=0).numpy()
        d, c = np.asarray(d), np.asarray(c)
        masks.append((d > 0) & (c >= thresholds.c_min) & (n >= thresholds.n_min))
    return masks


def _source_points(dr, ds, cr: ViewCamera, cs: ViewCamera) -> torch.Tensor:
    """World point seen by the source view where each reference pixel lands (nearest depth lookup)."""
    d0 = torch.where(dr > 0, dr, torch.ones_like(dr))
    x1, y1, _ = warp_to_source(cr, cs, d0)
    sampled, _ = nearest_sample(ds.unsqueeze(0), x1, y1)
    z = sampled[0]
    z = torch.where(z > 0, z, torch.ones_like(z))
    return backproject(cs, torch.stack([x1, y1], dim=-1), z)


def fuse(depths, masks, cams: list[ViewCamera],
         thresholds: FilterThresholds = FilterThresholds()) -> PointCloud:
    """Back-project every surviving pixel, averaged with the points of the views
    consistent with it. Points are ordered by view, then row, then column."""
    depths = [_t(d) for d in depths]
    agree_all = consistency_counts(depths, cams, thresholds) if len(cams) > 1 else [None]
    points, views = [], []
    for r, (dr, cr, mask) in enumerate(zip(depths, cams, masks)):
        mask = np.asarray(mask, dtype=bool) & (dr.numpy() > 0)
        if not mask.any():
            continue
        h, w = dr.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        d0 = torch.where(dr > 0, dr, torch.ones_like(dr))
        own = backproject(cr, torch.as_tensor(np.stack([xs, ys], -1)), d0).numpy()
        total, count = own.copy(), np.ones((h, w))
        if agree_all[0] is not None:
            for s, (ds, cs) in enumerate(zip(depths, cams)):
                if s == r:
                    continue
                ok = agree_all[r][s].numpy() & mask
                if not ok.any():
                    continue
                pts = _source_points(dr, ds, cr, cs).numpy()
                total[ok] += pts[ok]
                count[ok] += 1
        fused = total / count[..., None]
        points.append(fused[mask])
        views.append(np.full(int(mask.sum()), r))
    if not points:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, dtype=int))
    return PointCloud(np.concatenate(points), np.concatenate(views))


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    completeness: float
    overall: float
    precision: float  # percent
    recall: float     # percent
    fscore: float     # percent
    tau: float

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path_kv, path_json=None) -> None:
        write_kv(path_kv, self.to_dict())
        if path_json is not None:
            write_json(path_json, self.to_dict())


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Distance from every query point to its nearest reference point.

    The tree only picks the neighbour; the distance is then recomputed as
    sqrt(sum of squared differences) so it does not depend on the index."""
    _, idx = cKDTree(ref).query(query, k=1)
    diff = query - ref[idx]
    return np.sqrt((diff * diff).sum(axis=1))


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)


def evaluate(recon, gt, tau: float, outlier_cap: float | None = None) -> MetricReport:
    """Mean-distance accuracy/completeness plus precision/recall/F-score at ``tau``.

    Distances above ``outlier_cap`` are left out of the two means (not of the
    precision/recall fractions)."""
    r, g = _points(recon), _points(gt)
    if len(r) == 0 or len(g) == 0:
        raise ValueError("cannot evaluate an empty point cloud")
    d_rg = nearest_distances(r, g)
    d_gr = nearest_distances(g, r)

    def capped_mean(d):
        if outlier_cap is not None:
            d = d[d <= outlier_cap]
        return float(d.mean()) if len(d) else float("nan")

    acc, comp = capped_mean(d_rg), capped_mean(d_gr)
    precision = 100.0 * float((d_rg <= tau).mean())
    recall = 100.0 * float((d_gr <= tau).mean())
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricReport(acc, comp, (acc + comp) / 2, precision, recall, f, float(tau))
