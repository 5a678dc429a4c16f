from __future__ import annotations

import hashlib
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .geometry import CameraRig, UVDGrid
from .settings import Settings


SHAPE_KINDS = ("sphere", "box", "cylinder", "ellipsoid", "capsule")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RigConfig(_Section):
    fx: float = Field(140.0, gt=0)
    fy: float = Field(140.0, gt=0)
    cx: float = 80.0
    cy: float = 60.0
    baseline: float = Field(0.13, gt=0)
    width: int = Field(160, ge=1)
    height: int = Field(120, ge=1)

    def to_rig(self) -> CameraRig:
        return CameraRig(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            baseline=self.baseline,
            width=self.width,
            height=self.height,
        )


class DataConfig(_Section):
    root: Path = Path("data")
    train_scenes: int = Field(2000, ge=0)
    val_scenes: int = Field(200, ge=0)
    min_objects: int = Field(1, ge=1)
    max_objects: int = Field(3, ge=1)
    scale_range: tuple[float, float] = (0.05, 0.25)
    depth_range: tuple[float, float] = (0.5, 2.0)
    kinds: tuple[str, ...] = SHAPE_KINDS
    n_surface: int = Field(2048, ge=2)
    n_queries: int = Field(4096, ge=2)
    near_surface_sigma: float = Field(0.05, gt=0)
    lat_segments: int = Field(16, ge=4)
    lon_segments: int = Field(32, ge=4)
    workers: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "DataConfig":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        dlo, dhi = self.depth_range
        if not 0 < dlo < dhi:
            raise ValueError("depth_range must satisfy 0 < lo < hi")
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"kinds must be a non-empty subset of {SHAPE_KINDS}")
        return self


class VAEConfig(_Section):
    n_surface: int = Field(2048, ge=1)
    width: int = Field(256, ge=1)
    latent_width: int = Field(64, ge=1)
    encoder_blocks: int = Field(4, ge=1)
    decoder_blocks: int = Field(4, ge=1)
    n_freqs: int = Field(8, ge=1)
    heads: int = Field(8, ge=1)
    n_point_tokens: int = Field(256, ge=1)
    voxel_space: Literal["sphere", "cube"] = "sphere"

    @model_validator(mode="after")
    def _check_widths(self) -> "VAEConfig":
        if self.latent_width >= self.width:
            raise ValueError("latent_width must be smaller than width")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        return self


class EncoderConfig(_Section):
    U: int = Field(20, ge=1)
    V: int = Field(15, ge=1)
    D: int = Field(16, ge=1)
    width: int = Field(128, ge=1)
    n_layers: int = Field(2, ge=0)
    heads: int = Field(8, ge=1)
    ref_points_per_cell: int = Field(4, ge=1)
    use_right_view: bool = True

    @model_validator(mode="after")
    def _check_heads(self) -> "EncoderConfig":
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        return self


class DecoderConfig(_Section):
    n_queries: int = Field(16, ge=1)
    n_layers: int = Field(4, ge=1)
    width: int = Field(128, ge=1)
    heads: int = Field(8, ge=1)
    confidence_threshold: float = Field(0.5, ge=0.0, le=1.0)


class LossConfig(_Section):
    lambda_shape: float = Field(0.5, ge=0)
    lambda_conf: float = Field(0.2, ge=0)
    w_pos: float = Field(1.0, ge=0)
    w_scale: float = Field(1.0, ge=0)
    w_conf: float = Field(1.0, ge=0)
    w_shape: float = Field(1.0, ge=0)
    match_with_shape: bool = False
    unmatched_conf_weight: float = Field(0.1, ge=0)
    shape_recon_weight: float = Field(0.0, ge=0)


class OptimConfig(_Section):
    lr: float = Field(2.0e-4, gt=0)
    weight_decay: float = Field(1.0e-2, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    min_lr_ratio: float = Field(0.0, ge=0, le=1)


class TrainVAEConfig(_Section):
    steps: int = Field(20000, ge=1)
    batch_size: int = Field(16, ge=1)
    train_queries: int = Field(2048, ge=1)
    kl_weight: float = Field(1.0e-3, ge=0)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(1000, ge=1)
    max_shapes: int | None = Field(None, ge=1)
    workers: int = Field(2, ge=0)


class TrainDetectorConfig(_Section):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(8, ge=1)
    log_every: int = Field(50, ge=1)
    val_every: int = Field(5, ge=1)
    val_limit: int = Field(50, ge=1)
    workers: int = Field(2, ge=0)


class EvalConfig(_Section):
    iou_thresholds: tuple[float, ...] = (0.25, 0.5, 0.75)
    fscore_tau_ratio: float = Field(0.1, gt=0)
    unmatched_chamfer_penalty: float = Field(2.0, ge=0)
    topk: int = Field(10, ge=1)
    mesh_resolution: int = Field(48, ge=8)
    surface_samples: int = Field(2048, ge=1)
    workers: int = Field(4, ge=1)


class RunConfig(_Section):
    seed: int = 0
    device: str = "auto"
    strict_deterministic: bool = False
    run_dir: Path | None = None
    rig: RigConfig = RigConfig()
    data: DataConfig = DataConfig()
    vae: VAEConfig = VAEConfig()
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    train_vae: TrainVAEConfig = TrainVAEConfig()
    train_detector: TrainDetectorConfig = TrainDetectorConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check_cross_sections(self) -> "RunConfig":
        if self.vae.n_surface != self.data.n_surface:
            raise ValueError("vae.n_surface must equal data.n_surface")
        if self.decoder.n_queries < self.data.max_objects:
            raise ValueError("decoder.n_queries must be at least data.max_objects")
        if self.decoder.width != self.encoder.width:
            raise ValueError("decoder.width must equal encoder.width")
        if self.decoder.width % self.decoder.heads:
            raise ValueError("decoder.width must be divisible by decoder.heads")
        if not 0 <= self.rig.cx < self.rig.width or not 0 <= self.rig.cy < self.rig.height:
            raise ValueError("principal point must lie inside the image")
        return self

    def uvd_grid(self) -> UVDGrid:
        lo, hi = self.data.depth_range
        return UVDGrid(U=self.encoder.U, V=self.encoder.V, D=self.encoder.D, d_min=lo, d_max=hi)

    def resolved_run_dir(self) -> Path:
        return self.run_dir or Settings().default_run_dir()

    def arch_hash(self, *sections: str) -> str:
        dump = self.model_dump(mode="json")
        payload = {name: dump[name] for name in sections}
        raw = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def vae_hash(self) -> str:
        return self.arch_hash("vae")

    def detector_hash(self) -> str:
        return self.arch_hash("rig", "encoder", "decoder", "vae")


def config_from_dict(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def apply_env_overrides(cfg: RunConfig, settings: Settings | None = None) -> RunConfig:
    settings = settings or Settings()
    updates: dict[str, object] = {}
    seed = settings.seed_override()
    if seed is not None:
        updates["seed"] = seed
    device = settings.device_override()
    if device is not None:
        updates["device"] = device
    return cfg.model_copy(update=updates) if updates else cfg


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return apply_env_overrides(RunConfig())
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e
    return apply_env_overrides(config_from_dict(raw))
