"""Pydantic models for run configuration, scene specs and reports."""

import hashlib
import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, Field, PositiveFloat, model_validator

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "step",
    "psnr",
    "ssim",
    "l_rgb",
    "l_depth",
    "l_photo",
    "w",
    "rot_err_deg",
    "trans_err",
]

TRAJECTORY_COLUMNS = [
    "mode",
    "target",
    "neighbor",
    "iteration",
    "rot_err_deg",
    "trans_err",
    "mean_cost",
]

# Fields that fix parameter shapes; checkpoints carry a hash of these.
ARCHITECTURE_FIELDS = (
    "feature_channels",
    "aggregate_dim",
    "renderer_hidden",
    "encoder_dim",
    "gru_hidden",
)


class SceneSpec(BaseModel):
    seed: int = 0
    plane_count: int = Field(3, ge=1, le=4)
    depth_min: PositiveFloat = 2.0
    depth_max: PositiveFloat = 6.0
    texture_octaves: int = Field(4, ge=1)
    texture_frequency: PositiveFloat = 1.5
    fronto_parallel: bool = False
    trajectory: Literal["arc", "orbit"] = "arc"
    n_views: int = Field(12, ge=2)
    arc_span_deg: PositiveFloat = 30.0
    orbit_radius: PositiveFloat = 0.3
    image_width: int = Field(128, ge=8)
    image_height: int = Field(96, ge=8)
    focal: PositiveFloat = 110.0

    @model_validator(mode="after")
    def _check_depths(self):
        if self.depth_min >= self.depth_max:
            raise ValueError(
                f"depth_min {self.depth_min} must be below depth_max {self.depth_max}"
            )
        return self


class RunConfig(BaseModel):
    # Data
    scenes: List[int] = [0, 1, 2, 3]
    seed: int = 0
    image_width: int = Field(128, ge=8)
    image_height: int = Field(96, ge=8)
    focal: PositiveFloat = 110.0
    plane_count: int = Field(3, ge=1, le=4)
    depth_min: PositiveFloat = 2.0
    depth_max: PositiveFloat = 6.0
    texture_octaves: int = Field(4, ge=1)
    texture_frequency: PositiveFloat = 1.5
    trajectory: Literal["arc", "orbit"] = "arc"
    n_views_per_scene: int = Field(12, ge=2)
    arc_span_deg: PositiveFloat = 30.0
    holdout_every: int = Field(4, ge=2)

    # Learning rates (pretraining, then fine-tuning)
    lr_feature: PositiveFloat = 1e-3
    lr_renderer: PositiveFloat = 5e-4
    lr_pose: PositiveFloat = 2e-4
    ft_lr_feature: PositiveFloat = 5e-4
    ft_lr_renderer: PositiveFloat = 2e-4
    ft_lr_pose: PositiveFloat = 1e-5
    grad_clip: PositiveFloat = 1.0

    # Batching and budgets
    n_views_train: int = Field(5, ge=1)
    n_views_eval: int = Field(10, ge=1)
    ray_batch: int = Field(512, ge=1)
    n_samples: int = Field(64, ge=2)
    near: PositiveFloat = 1.0
    far: PositiveFloat = 9.0
    pretrain_iters: int = Field(20000, ge=0)
    finetune_iters: int = Field(2000, ge=0)
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(1000, ge=1)

    # Loss schedule
    beta: float = -1e-4
    alpha: float = Field(0.85, ge=0.0, le=1.0)

    # Architecture
    feature_channels: List[int] = [16, 32, 64]
    aggregate_dim: int = Field(32, ge=1)
    renderer_hidden: int = Field(64, ge=1)
    encoder_dim: int = Field(32, ge=1)
    gru_hidden: int = Field(64, ge=1)

    # Pose-depth optimizer
    t_max: int = Field(4, ge=1)
    init_eps: float = Field(0.05, ge=0.0)
    twist_cap: PositiveFloat = 0.2
    depth_cap: PositiveFloat = 0.1
    patch_size: int = Field(16, ge=2)
    n_patches: int = Field(8, ge=1)
    robust_loss: Literal["l2", "charbonnier"] = "l2"
    charbonnier_eps: PositiveFloat = 1e-3
    stats_momentum: float = Field(0.01, gt=0.0, le=1.0)

    # Scene graph
    max_keypoints: int = Field(512, ge=8)
    nms_radius: int = Field(4, ge=1)
    ratio_test: float = Field(0.8, gt=0.0, le=1.0)
    ransac_threshold: PositiveFloat = 2.0
    ransac_iterations: int = Field(1000, ge=1)
    min_matches: int = Field(30, ge=1)
    match_file: Optional[str] = None
    workers: Optional[int] = None

    # BA lab
    ba_lab_steps: int = Field(2000, ge=0)
    ba_lab_lr: PositiveFloat = 1e-5
    ba_lab_noise_deg: float = Field(0.5, ge=0.0)
    barf_pe_frequencies: int = Field(6, ge=1)
    barf_pe_lr: PositiveFloat = 1e-3
    barf_pe_pose_lr: PositiveFloat = 1e-3
    barf_pe_schedule: List[float] = [0.1, 0.5]
    barf_pe_hidden: int = Field(64, ge=1)

    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.near >= self.far:
            raise ValueError(f"near {self.near} must be below far {self.far}")
        if self.depth_min >= self.depth_max:
            raise ValueError(
                f"depth_min {self.depth_min} must be below depth_max {self.depth_max}"
            )
        if len(self.feature_channels) != 3 or min(self.feature_channels) < 1:
            raise ValueError("feature_channels needs three positive widths")
        lo, hi = self.barf_pe_schedule
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"barf_pe_schedule {self.barf_pe_schedule} is not a range")
        return self

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(
            seed=seed,
            plane_count=self.plane_count,
            depth_min=self.depth_min,
            depth_max=self.depth_max,
            texture_octaves=self.texture_octaves,
            texture_frequency=self.texture_frequency,
            trajectory=self.trajectory,
            n_views=self.n_views_per_scene,
            arc_span_deg=self.arc_span_deg,
            image_width=self.image_width,
            image_height=self.image_height,
            focal=self.focal,
        )

    def pretrain_rates(self) -> dict:
        return {
            "feature": self.lr_feature,
            "renderer": self.lr_renderer,
            "pose": self.lr_pose,
        }

    def finetune_rates(self) -> dict:
        return {
            "feature": self.ft_lr_feature,
            "renderer": self.ft_lr_renderer,
            "pose": self.ft_lr_pose,
        }


class LossReport(BaseModel):
    l_rgb: float
    l_depth: float
    l_photo: float
    w: float
    l_final: float
    t: int


class PoseErrorReport(BaseModel):
    rot_errors_deg: List[float]
    trans_errors: List[float]
    mean_rot_err_deg: float
    mean_trans_err: float
    mean_trans_err_x100: float
    alignment_rotation: List[List[float]]
    alignment_translation: List[float]
    alignment_scale: float


def _read_yaml(path: Union[str, Path], section: str) -> dict:
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} is not a valid YAML dictionary.")
    if section in data:
        nested = data.pop(section)
        data.update(nested)
    return data


def load_config(config_path: Union[str, Path]) -> RunConfig:
    """Load and validate a run configuration from a YAML file."""
    data = _read_yaml(config_path, "dbarf")
    data.pop("workdir", None)
    logger.info(f"Loaded config from {config_path}")
    return RunConfig(**data)


def save_config(config: BaseModel, path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.model_dump(), f, sort_keys=True)
    logger.info(f"Saved config to {path}")


def load_scene_spec(path: Union[str, Path]) -> SceneSpec:
    data = _read_yaml(path, "scene")
    logger.info(f"Loaded scene spec from {path}")
    return SceneSpec(**data)


def architecture_hash(config: RunConfig) -> str:
    fields = {name: getattr(config, name) for name in ARCHITECTURE_FIELDS}
    canonical = json.dumps(fields, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def split_views(n_views: int, holdout_every: int) -> Tuple[List[int], List[int]]:
    """Training and held-out view ids; every k-th view (interior) is held out."""
    offset = holdout_every // 2
    heldout = [i for i in range(n_views) if i % holdout_every == offset]
    train = [i for i in range(n_views) if i % holdout_every != offset]
    return train, heldout
