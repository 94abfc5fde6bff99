"""Cascade multi-view stereo with window-based epipolar attention and a cost-volume transformer."""

from .config import ConfigError, PipelineConfig
from .fusion import FilterThresholds, MetricReport, PointCloud, consistency_filter, evaluate, fuse
from .geometry import ViewCamera, backproject, plane_sweep_homography, project, reprojection_errors
from .pipeline import WTMVSNet, build_model, infer, train
from .scenes import SceneSpec, generate

__all__ = [
    "ConfigError", "PipelineConfig", "FilterThresholds", "MetricReport", "PointCloud",
    "consistency_filter", "evaluate", "fuse", "ViewCamera", "backproject", "plane_sweep_homography",
    "project", "reprojection_errors", "WTMVSNet", "build_model", "infer", "train", "SceneSpec", "generate",
]
