"""Three-stage cascade: model assembly, inference and the desk-scale training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import PipelineConfig
from .cost_volume import DepthHypotheses, build_cost_volume, generate_hypotheses, to_depth
from .fpn import FeaturePyramidNet
from .geometry import ViewCamera
from .io import load_checkpoint, save_checkpoint
from .losses import ce_loss, geo_loss, total_loss
from .numeric import DTYPE, upsample
from .regularizers import make_regularizer
from .wet import FeaturePathway, WindowEpipolarTransformer

log = logging.getLogger(__name__)

STAGE_SCALES = (0.25, 0.5, 1.0)


class PipelineError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class StageOutput:
    prob: torch.Tensor
    hyps: DepthHypotheses
    depth: torch.Tensor          # winner-take-all
    depth_expect: torch.Tensor   # soft-argmax, differentiable
    confidence: torch.Tensor
    used_wet: bool = False


@dataclass
class CascadeOutput:
    stages: list[StageOutput]
    stage1_iterations: list[StageOutput] = field(default_factory=list)

    @property
    def depth(self) -> torch.Tensor:
        return self.stages[-1].depth

    @property
    def confidence(self) -> torch.Tensor:
        return self.stages[-1].confidence


class WTMVSNet(nn.Module):
    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3 = cfg.fpn_channels
        self.fpn = FeaturePyramidNet(cfg.fpn_channels)
        if cfg.use_wet:
            self.wet = WindowEpipolarTransformer(c1, cfg.wet_window, cfg.wet_heads, cfg.wet_blocks,
                                                 cross_bias=cfg.wet_cross_bias)
            self.pathway = FeaturePathway(c1, c2, c3)
        self.iter1_reg = make_regularizer(cfg.iter1_reg, cfg.groups, cfg.ct_config())
        self.regs = nn.ModuleList([make_regularizer(cfg.reg, cfg.groups, cfg.ct_config())
                                   for _ in range(cfg.stages)])
        self.double()

    def _stage(self, k, feats, cams, prev_depth, reg, used_wet=False) -> StageOutput:
        cfg = self.cfg
        shape = tuple(feats.shape[-2:])
        hyps = generate_hypotheses(k, cams[0].depth_range, shape, prev_depth, cfg.depth_counts,
                                   cfg.interval_factors, cfg.interval_mode)
        volume = build_cost_volume(feats[0], feats[1:], cams[0], cams[1:], hyps, cfg.groups)
        prob = reg(volume)
        depth, conf = to_depth(prob, hyps, "winner_take_all")
        expect, _ = to_depth(prob, hyps, "expectation")
        return StageOutput(prob, hyps, depth, expect, conf, used_wet)

    def forward(self, images: torch.Tensor, cams: list[ViewCamera]) -> CascadeOutput:
        """images: (V, 3, H, W), view 0 is the reference; cams at full resolution."""
        if images.shape[0] != len(cams):
            raise PipelineError(f"{images.shape[0]} images but {len(cams)} cameras")
        pyr = self.fpn(images)
        stage_cams = [[c.scaled(s) for c in cams] for s in STAGE_SCALES]

        # stage 1, iteration 1: plain features, used only to place the epipolar windows
        first = self._stage(1, pyr.stage1, stage_cams[0], None, self.iter1_reg)
        iterations = [first]
        feats1, s2, s3 = pyr.stage1, pyr.stage2, pyr.stage3
        if self.cfg.use_wet:
            coarse = first.depth_expect if self.cfg.iter1_depth == "expectation" else first.depth
            feats1, _ = self.wet(pyr.stage1, stage_cams[0], coarse.detach())
            s2, s3 = self.pathway(feats1, pyr.stage2, pyr.stage3)
        out = self._stage(1, feats1, stage_cams[0], None, self.regs[0], used_wet=self.cfg.use_wet)
        iterations.append(out)
        stages = [out]
        for k, feats in ((2, s2), (3, s3))[: self.cfg.stages - 1]:
            out = self._stage(k, feats, stage_cams[k - 1], stages[-1].depth.detach(), self.regs[k - 1])
            stages.append(out)
        return CascadeOutput(stages, iterations)

    def state_arrays(self) -> dict:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> "WTMVSNet":
        arrays = load_checkpoint(path)
        self.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()})
        return self


def build_model(cfg: PipelineConfig = PipelineConfig(), seed: int | None = None) -> WTMVSNet:
    torch.manual_seed(cfg.seed if seed is None else seed)
    return WTMVSNet(cfg)


def full_resolution(depth: torch.Tensor, size) -> torch.Tensor:
    if tuple(depth.shape) == tuple(size):
        return depth
    return upsample(depth, size[0] // depth.shape[0], tuple(size))


@dataclass
class InferenceResult:
    depth: np.ndarray
    confidence: np.ndarray
    stage_depths: list[np.ndarray]
    stage1_iterations: int
    stage1_wet: list[bool]


def infer(images, cams: list[ViewCamera], model: WTMVSNet) -> InferenceResult:
    """Depth and confidence of view 0 at full resolution (winner-take-all)."""
    images = torch.as_tensor(np.asarray(images), dtype=DTYPE) if not torch.is_tensor(images) else images
    if images.shape[-1] == 3 and images.shape[1] != 3:
        images = images.permute(0, 3, 1, 2)
    sizes = {tuple(cam.K.shape) for cam in cams}
    if len(sizes) != 1:
        raise PipelineError("inconsistent cameras")
    H, W = images.shape[-2:]
    model.eval()
    with torch.no_grad():
        out = model(images.contiguous(), cams)
    depth = full_resolution(out.depth, (H, W))
    conf = full_resolution(out.confidence, (H, W))
    return InferenceResult(depth.numpy().copy(), conf.numpy().copy(),
                           [s.depth.numpy().copy() for s in out.stages],
                           len(out.stage1_iterations), [s.used_wet for s in out.stage1_iterations])


@dataclass
class TrainingSample:
    images: torch.Tensor        # (V, 3, H, W), view 0 the reference
    cams: list[ViewCamera]
    depths: torch.Tensor        # (V, H, W) ground truth, 0 = invalid


def learning_rate(cfg: PipelineConfig, step: int) -> float:
    """Step decay: multiply by ``lr_decay`` at each milestone, milestones scaled from epochs to steps."""
    passed = sum(step >= round(m / cfg.epochs * cfg.steps) for m in cfg.lr_milestones)
    return cfg.lr * cfg.lr_decay ** passed


def stage_losses(out: CascadeOutput, sample: TrainingSample, cfg: PipelineConfig):
    lcfg = cfg.loss_config()
    ce, geo = [], []
    for k, st in enumerate(out.stages, start=1):
        step = int(round(1 / STAGE_SCALES[k - 1]))
        gt = sample.depths[:, ::step, ::step]
        valid = gt[0] > 0
        ce.append(ce_loss(st.prob, gt[0], st.hyps, valid))
        cams = [c.scaled(STAGE_SCALES[k - 1]) for c in sample.cams]
        if cfg.lambda2 > 0:
            g = geo_loss(st.depth_expect, list(gt[1:]), cams[0], cams[1:], lcfg, k, valid)
            geo.append(g.loss)
        else:
            geo.append(torch.zeros((), dtype=DTYPE))
    return ce, geo


def train(samples: list[TrainingSample], cfg: PipelineConfig = PipelineConfig(),
          model: WTMVSNet | None = None, steps: int | None = None, callback=None):
    """Adam on the cascade loss, one sample per step, cycling through ``samples``.

    Returns ``(model, history)`` where history rows are dicts with keys
    step, stage, ce, geo, total, lr.
    """
    steps = cfg.steps if steps is None else steps
    cfg = cfg.replace(steps=steps)
    model = build_model(cfg) if model is None else model
    if steps == 0:
        return model, []
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    model.train()
    for step in range(steps):
        lr = learning_rate(cfg, step)
        for group in opt.param_groups:
            group["lr"] = lr
        sample = samples[step % len(samples)]
        out = model(sample.images, sample.cams)
        if not all(bool(torch.isfinite(st.prob).all()) for st in out.stages):
            raise TrainingDiverged(f"non-finite probability volume at step {step}", {"step": step, "lr": lr})
        ce_t, geo_t = stage_losses(out, sample, cfg)
        loss = total_loss(ce_t, geo_t, cfg.loss_config())
        ce = [float(c.detach()) for c in ce_t]
        geo = [float(g.detach()) for g in geo_t]
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}",
                                   {"step": step, "lr": lr, "ce": ce, "geo": geo})
        opt.zero_grad()
        loss.backward()
        opt.step()
        for k, (c, g) in enumerate(zip(ce, geo), start=1):
            history.append({"step": step, "stage": k, "ce": c, "geo": g, "total": value, "lr": lr})
        if callback is not None:
            callback(step, value)
        log.debug("step %d loss %.5f", step, value)
    return model, history
