"""Training configuration: per-stage knobs with library defaults, loadable
from an INI-style key-value file with one section per stage.

Values carried from the method itself (garment extraction distance 0.015,
scale split/clip 0.01) default to those numbers; iteration counts, learning
rates and loss weights are tuning knobs.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .optim import DensifyConfig, LearningRates


@dataclass
class StageConfig:
    iterations: int = 5000
    n_init: int = 30000
    seed: int = 0
    # loss weights
    w_rgb: float = 1.0
    w_distortion: float = 100.0
    w_normal: float = 0.05
    w_sds: float = 0.1
    w_seg: float = 1.0
    lambda_c: float = 0.2          # D-SSIM share of the photometric loss
    # learning rates
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    # densification; the gradient threshold is in screen-scaled units and
    # depends on resolution and loss weights (generated dataset configs
    # carry measured values)
    densify_interval: int = 200
    densify_start: int = 200
    densify_stop_frac: float = 0.6
    densify_grad_threshold: float = 2e4
    densify_size_threshold: float = 0.02
    prune_opacity: float = 0.01
    max_splats: int = 150000
    scale_split_threshold: Optional[float] = None  # 0.01 in stage 3
    # guidance
    guidance_interval: int = 5
    guidance_scale: float = 50.0
    prompt: str = ""
    checkpoint_interval: int = 0

    def learning_rates(self) -> LearningRates:
        return LearningRates(mu=self.lr_position, q=self.lr_rotation,
                             s=self.lr_scale, opacity=self.lr_opacity,
                             color=self.lr_color)

    def densify_config(self) -> DensifyConfig:
        return DensifyConfig(grad_threshold=self.densify_grad_threshold,
                             size_threshold=self.densify_size_threshold,
                             prune_opacity=self.prune_opacity,
                             scale_split_threshold=self.scale_split_threshold)

    def in_densify_window(self, it: int) -> bool:
        return (self.densify_start <= it < self.densify_stop_frac * self.iterations
                and (it + 1) % self.densify_interval == 0)


def stage1_defaults() -> StageConfig:
    return StageConfig(iterations=10000, n_init=30000)


def stage2_defaults() -> StageConfig:
    return StageConfig(iterations=5000)


def stage3_defaults() -> StageConfig:
    return StageConfig(iterations=5000, scale_split_threshold=0.01)


@dataclass
class PipelineConfig:
    stage1: StageConfig = field(default_factory=stage1_defaults)
    stage2: StageConfig = field(default_factory=stage2_defaults)
    stage3: StageConfig = field(default_factory=stage3_defaults)
    seed: int = 0
    threads: int = 0                     # 0 = numba default
    grid_resolution: int = 64
    tsdf_voxel: float = 0.01
    tsdf_truncation_factor: float = 4.0
    n_fuse_cameras: int = 26
    garment_distance_threshold: float = 0.015
    dummy_samples: int = 20000
    clearance: float = 0.005
    guidance: str = "off"                # off | mock:<dir> | http:<url>

    def seeded(self) -> "PipelineConfig":
        """Propagate the global seed into the per-stage seeds."""
        out = replace(self)
        out.stage1 = replace(self.stage1, seed=self.seed)
        out.stage2 = replace(self.stage2, seed=self.seed + 1)
        out.stage3 = replace(self.stage3, seed=self.seed + 2)
        return out


def _apply(dc, section: configparser.SectionProxy):
    valid = {f.name: f.type for f in fields(dc)}
    for key, raw in section.items():
        if key not in valid:
            raise KeyError(f"unknown config key {key!r} in [{section.name}]")
        cur = getattr(dc, key)
        if isinstance(cur, StageConfig):
            raise KeyError(f"{key!r} is a stage section, not a [global] key")
        if key == "scale_split_threshold":
            value = None if raw.lower() in ("none", "off") else float(raw)
        elif isinstance(cur, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(cur, int) and not isinstance(cur, bool):
            value = int(raw)
        elif isinstance(cur, float):
            value = float(raw)
        else:
            value = raw
        setattr(dc, key, value)


def load_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Build a PipelineConfig from defaults, an optional INI file, and an
    optional {section: {key: value}} override map (CLI flags)."""
    cfg = PipelineConfig()
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file missing: {path}")
        parser.read(path)
    if overrides:
        parser.read_dict({k: {kk: str(vv) for kk, vv in v.items()}
                          for k, v in overrides.items()})
    for name, target in (("global", cfg), ("stage1", cfg.stage1),
                         ("stage2", cfg.stage2), ("stage3", cfg.stage3)):
        if parser.has_section(name):
            _apply(target, parser[name])
    return cfg
