"""Run configuration as a flat key=value file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .cost_transformer import CtConfig
from .io import read_kv, write_kv
from .losses import LossConfig
from .regularizers import KINDS


class ConfigError(ValueError):
    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(f"{k}: {v}" for k, v in problems.items()))


@dataclass(frozen=True)
class PipelineConfig:
    # cascade
    n_views: int = 5
    stages: int = 3
    depth_counts: tuple[int, ...] = (48, 32, 8)
    interval_factors: tuple[float, ...] = (0.25, 0.5)
    interval_mode: str = "successive"
    groups: int = 4
    fpn_channels: tuple[int, ...] = (32, 16, 8)
    # window-based epipolar transformer
    use_wet: bool = True
    wet_window: tuple[int, ...] = (16, 16)
    wet_blocks: int = 1
    wet_heads: int = 2
    wet_cross_bias: bool = True
    iter1_reg: str = "none"
    iter1_depth: str = "expectation"
    # regularization
    reg: str = "ct"
    ct_block: tuple[int, ...] = (2, 4, 4)
    ct_embed_dim: int = 32
    ct_blocks: int = 3
    ct_window: tuple[int, ...] = (2, 8, 10)
    ct_heads: int = 2
    ct_merge_depth: bool = True
    ct_expansion: str = "linear"
    # loss
    gamma: float = 100.0
    lambda1: float = 2.0
    lambda2: float = 1.0
    tau1: tuple[float, ...] = (3.0, 2.0, 1.0)
    tau2: tuple[float, ...] = (0.1, 0.05, 0.01)
    geo_set: str = "intersection"
    # optimisation; milestones are epochs of an `epochs`-long schedule, stretched over `steps`
    lr: float = 0.001
    epochs: int = 16
    lr_milestones: tuple[int, ...] = (6, 8, 12)
    lr_decay: float = 0.5
    steps: int = 200
    seed: int = 0
    # fusion
    filter_theta_p: float = 1.0
    filter_theta_d: float = 0.01
    filter_n_min: int = 2
    filter_c_min: float = 0.3

    def validate(self) -> "PipelineConfig":
        problems = {}
        if self.stages not in (1, 2, 3):
            problems["stages"] = "must be 1, 2 or 3"
        if len(self.depth_counts) != 3 or any(c < 2 for c in self.depth_counts):
            problems["depth_counts"] = "three counts, each >= 2"
        if len(self.interval_factors) != 2 or any(f <= 0 for f in self.interval_factors):
            problems["interval_factors"] = "two positive factors"
        if self.interval_mode not in ("successive", "relative"):
            problems["interval_mode"] = "successive or relative"
        if self.reg not in KINDS:
            problems["reg"] = f"one of {KINDS}"
        if self.iter1_reg not in KINDS:
            problems["iter1_reg"] = f"one of {KINDS}"
        if self.iter1_depth not in ("expectation", "winner_take_all"):
            problems["iter1_depth"] = "expectation or winner_take_all"
        if self.geo_set not in ("intersection", "union", "literal_union"):
            problems["geo_set"] = "intersection or union"
        if self.n_views < 2:
            problems["n_views"] = ">= 2"
        if self.fpn_channels[0] % self.groups or self.fpn_channels[1] % self.groups \
                or self.fpn_channels[2] % self.groups:
            problems["groups"] = "must divide every pyramid channel count"
        if self.steps < 0:
            problems["steps"] = ">= 0"
        try:
            self.loss_config()
        except ValueError as exc:
            problems["loss"] = str(exc)
        if problems:
            raise ConfigError(problems)
        return self

    def ct_config(self) -> CtConfig:
        return CtConfig(block=tuple(self.ct_block), embed_dim=self.ct_embed_dim, blocks=self.ct_blocks,
                        window=tuple(self.ct_window), heads=self.ct_heads, merge_depth=self.ct_merge_depth,
                        expansion=self.ct_expansion)

    def loss_config(self) -> LossConfig:
        mode = "intersection" if self.geo_set == "intersection" else "literal_union"
        return LossConfig(self.gamma, self.lambda1, self.lambda2, tuple(self.tau1), tuple(self.tau2), mode)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def save(self, path) -> None:
        write_kv(path, self.to_dict())

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        problems, kwargs = {}, {}
        for key, raw in values.items():
            if key not in known:
                problems[key] = "unknown key"
                continue
            default = getattr(cls(), key)
            try:
                kwargs[key] = parse_value(raw, default)
            except ValueError as exc:
                problems[key] = str(exc)
        try:
            cfg = cls(**kwargs).validate()
        except ConfigError as exc:
            problems.update(exc.problems)
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(read_kv(Path(path)))


def parse_value(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in raw.replace(" ", "").split(",") if v)
    return raw
