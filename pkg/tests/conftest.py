"""Shared fixtures: a tiny configuration that runs end to end in seconds."""

import numpy as np
import pytest

from dbarf.core.models import RunConfig

# Finite-difference agreement for single primitives and for composed paths.
PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
GRADIENT_SEEDS = range(100)


def make_tiny_config(**overrides) -> RunConfig:
    values = dict(
        scenes=[0],
        seed=0,
        image_width=32,
        image_height=32,
        focal=30.0,
        plane_count=2,
        n_views_per_scene=5,
        holdout_every=5,
        n_views_train=2,
        n_views_eval=2,
        ray_batch=16,
        n_samples=8,
        pretrain_iters=2,
        finetune_iters=1,
        log_every=1,
        checkpoint_every=1,
        feature_channels=[4, 8, 8],
        aggregate_dim=8,
        renderer_hidden=8,
        encoder_dim=8,
        gru_hidden=8,
        t_max=2,
        patch_size=4,
        n_patches=2,
        max_keypoints=64,
        nms_radius=2,
        min_matches=8,
        ransac_iterations=50,
        workers=1,
        ba_lab_steps=3,
        barf_pe_frequencies=3,
        barf_pe_hidden=8,
        dtype="float64",
    )
    values.update(overrides)
    return RunConfig(**values)


def bilinear_map(rng: np.random.Generator, height: int, width: int, channels: int) -> np.ndarray:
    """(H,W,C) map ``a + b x + c y + d x y`` per channel.

    Bilinear sampling reproduces it exactly, so sampled values are smooth in
    the coordinates across texel boundaries.
    """
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    a = rng.uniform(0.3, 0.6, channels)
    b = rng.uniform(-0.05, 0.05, channels)
    c = rng.uniform(-0.05, 0.05, channels)
    d = rng.uniform(-0.05, 0.05, channels) / max(height, width)
    return a + b * x[..., None] + c * y[..., None] + d * (x * y)[..., None]


@pytest.fixture
def tiny_config() -> RunConfig:
    return make_tiny_config()
