"""Reconstruction of a whole scene and the regularizer comparison harness."""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np
import torch

from .config import PipelineConfig
from .fusion import FilterThresholds, MetricReport, PointCloud, consistency_filter, evaluate, fuse
from .pipeline import TrainingSample, WTMVSNet, build_model, infer, train
from .regularizers import KINDS
from .scenes import Scene


def thresholds(cfg: PipelineConfig) -> FilterThresholds:
    return FilterThresholds(cfg.filter_theta_p, cfg.filter_theta_d, cfg.filter_n_min, cfg.filter_c_min)


def scene_samples(scene: Scene, n_views: int | None = None, refs=None) -> list[TrainingSample]:
    """One sample per reference view; each keeps the first ``n_views`` views of its ordering."""
    out = []
    for ref in (range(len(scene.cams)) if refs is None else refs):
        images, cams, depths = scene.sample(ref)
        n = len(cams) if n_views is None else n_views
        out.append(TrainingSample(images[:n], cams[:n], depths[:n]))
    return out


def infer_views(scene: Scene, model: WTMVSNet, n_views: int | None = None):
    """Depth and confidence for every view of the scene taken in turn as the reference."""
    depths, confs = [], []
    for sample in scene_samples(scene, n_views):
        r = infer(sample.images, sample.cams, model)
        depths.append(r.depth)
        confs.append(r.confidence)
    return depths, confs


def reconstruct(scene: Scene, model: WTMVSNet, cfg: PipelineConfig) -> PointCloud:
    depths, confs = infer_views(scene, model, cfg.n_views)
    th = thresholds(cfg)
    masks = consistency_filter(depths, confs, scene.cams, th)
    return fuse(depths, masks, scene.cams, th)


@dataclass
class AblationRow:
    kind: str
    seed: int
    report: MetricReport | None
    points: int


def run_ablation(scene: Scene, cfg: PipelineConfig, kinds=KINDS, seeds=(0, 1, 2),
                 steps: int | None = None, tau: float = 0.05, log=None) -> list[AblationRow]:
    """Train one model per (regularizer, seed) with the same step budget, fuse and score it."""
    rows = []
    samples = scene_samples(scene, cfg.n_views)
    for kind in kinds:
        for seed in seeds:
            run_cfg = cfg.replace(reg=kind, seed=seed)
            torch.manual_seed(seed)
            model = build_model(run_cfg, seed)
            model, _ = train(samples, run_cfg, model, steps=steps)
            cloud = reconstruct(scene, model, run_cfg)
            report = evaluate(cloud, scene.gt_points, tau) if len(cloud) else None
            rows.append(AblationRow(kind, seed, report, len(cloud)))
            if log is not None:
                log(f"{kind} seed={seed} points={len(cloud)} "
                    f"overall={report.overall if report else float('nan'):.4f}")
    return rows


def median_overall(rows: list[AblationRow]) -> dict[str, float]:
    out = {}
    for kind in dict.fromkeys(r.kind for r in rows):
        vals = [r.report.overall if r.report else np.inf for r in rows if r.kind == kind]
        out[kind] = statistics.median(vals)
    return out


def ablation_table(rows: list[AblationRow]) -> str:
    lines = ["kind,seed,points,accuracy,completeness,overall,fscore"]
    for r in rows:
        m = r.report
        vals = (m.accuracy, m.completeness, m.overall, m.fscore) if m else (float("nan"),) * 4
        lines.append(f"{r.kind},{r.seed},{r.points}," + ",".join(f"{v:.6f}" for v in vals))
    for kind, med in median_overall(rows).items():
        lines.append(f"{kind},median,,,,{med:.6f},")
    return "\n".join(lines) + "\n"
