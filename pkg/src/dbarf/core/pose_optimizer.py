"""Recurrent pose and depth refinement from feature-metric cost maps."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    broadcast_to,
    clip,
    concat,
    getitem,
    gru_cell,
    init_gru_params,
    linear,
    relu,
    reshape,
    sqrt,
    tanh,
    upsample2x,
)
from .errors import DomainError, OptimizerDivergedError
from .geometry import Intrinsics, full_coordinates, se3_exp, se3_exp_tensor, warp_patch
from .models import RunConfig
from .renderer import FeaturePyramid

logger = logging.getLogger(__name__)

RESIDUAL_EPS = 1e-20
GEOMETRY_INPUTS = 4  # inverse depth, cost, two camera-normalized coordinates


@dataclass(eq=False)
class RunningStats:
    """Per-channel running mean and variance used to normalize residuals."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0
    momentum: float = 0.01

    @classmethod
    def create(cls, channels: int, momentum: float = 0.01) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), 0, momentum)

    def update(self, values: np.ndarray) -> None:
        if len(values) == 0:
            return
        batch_mean = values.mean(axis=0)
        batch_var = values.var(axis=0)
        if self.count == 0:
            self.mean, self.var = batch_mean, batch_var
        else:
            m = self.momentum
            self.mean = (1 - m) * self.mean + m * batch_mean
            self.var = (1 - m) * self.var + m * batch_var
        self.count += 1

    def normalize(self, x: Tensor) -> Tensor:
        return (x - self.mean) / np.sqrt(self.var + 1e-5)


@dataclass(eq=False)
class OptState:
    poses: Tensor  # (M, 4, 4) target-to-neighbor transforms
    inv_depth: Tensor  # (h1, w1) target inverse depth at the cost-map level
    hidden: Tensor  # (M, hidden)
    iteration: int = 0


@dataclass(eq=False)
class CostMap:
    """Feature-metric residuals of the target patches against every neighbor.

    Patch pixels are flattened to ``P * S * S`` rows.
    """

    residuals: Tensor  # (M, Np, C), zero where invalid
    mean_residual: Tensor  # (Np, C)
    rho: Tensor  # (M, Np) robust residual norms
    cost: Tensor  # (Np,) mean of rho over valid neighbors
    valid: np.ndarray  # (M, Np)
    validity: np.ndarray  # (M, P) fraction of valid pixels per patch
    patch_mask: np.ndarray  # (P,) patches seen by at least one neighbor
    target_features: Tensor  # (Np, C)
    inv_depth: Tensor  # (Np,)
    pixels: np.ndarray  # (Np, 2) full-resolution coordinates
    patch_size: int

    @property
    def mean_cost(self) -> float:
        seen = self.valid.any(axis=0)
        if not seen.any():
            return float("nan")
        return float(self.cost.data[seen].mean())


def init_optimizer_params(
    rng: np.random.Generator,
    feature_channels: int,
    encoder_dim: int = 32,
    hidden_dim: int = 64,
) -> Dict[str, Tensor]:
    c, e, hd = feature_channels, encoder_dim, hidden_dim
    width = 2 * c + GEOMETRY_INPUTS

    def weight(shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "pose.enc1.w": weight((width, e), width),
        "pose.enc1.b": zeros(e),
        "pose.enc2.w": weight((e, e), e),
        "pose.enc2.b": zeros(e),
        # Small heads keep early updates near the identity.
        "pose.head.w": Tensor(rng.normal(0.0, 1e-3, (hd, 6)), requires_grad=True),
        "pose.head.b": zeros(6),
        "pose.depth1.w": weight((c + 1 + hd, e), c + 1 + hd),
        "pose.depth1.b": zeros(e),
        "pose.depth2.w": Tensor(rng.normal(0.0, 1e-3, (e, 1)), requires_grad=True),
        "pose.depth2.b": zeros(1),
    }
    params.update(init_gru_params(rng, 3 * e, hd, prefix="pose.gru."))
    return params


def gru_params(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    prefix = "pose.gru."
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


def init_state(
    n_neighbors: int,
    depth_shape: Tuple[int, int],
    config: RunConfig,
    seed: int = 0,
    init_poses: Optional[np.ndarray] = None,
) -> OptState:
    """Identity-perturbed relative poses and mid-range constant inverse depth.

    Each pose is ``exp(xi)`` with every twist coordinate uniform in
    ``[-init_eps, init_eps]``; ``init_poses`` (M,4,4) overrides this.
    """
    if n_neighbors < 1:
        raise ValueError("The optimizer needs at least one neighbor view")
    if init_poses is None:
        rng = np.random.default_rng(seed)
        xi = rng.uniform(-config.init_eps, config.init_eps, (n_neighbors, 6))
        init_poses = np.stack([se3_exp(x).matrix() for x in xi])
    mid = 0.5 * (1.0 / config.near + 1.0 / config.far)
    return OptState(
        poses=Tensor(init_poses),
        inv_depth=Tensor(np.full(depth_shape, mid)),
        hidden=Tensor(np.zeros((n_neighbors, config.gru_hidden))),
        iteration=0,
    )


def sample_patch_corners(
    rng: np.random.Generator, shape: Tuple[int, int], patch_size: int, n_patches: int
) -> np.ndarray:
    """(P, 2) integer top-left (x, y) corners, patches fully inside ``shape``."""
    h, w = shape
    if h < patch_size or w < patch_size:
        raise DomainError(f"Cost-map level {w}x{h} is smaller than a {patch_size} patch")
    xs = rng.integers(0, w - patch_size + 1, n_patches)
    ys = rng.integers(0, h - patch_size + 1, n_patches)
    return np.stack([xs, ys], axis=1)


def _robust(sq_norm: Tensor, kind: str, eps: float) -> Tensor:
    if kind == "charbonnier":
        return sqrt(sq_norm + eps * eps) - eps
    return sqrt(sq_norm + RESIDUAL_EPS)


def build_cost_map(
    target: FeaturePyramid,
    neighbors: Sequence[FeaturePyramid],
    intrinsics_t: Intrinsics,
    intrinsics_n: Sequence[Intrinsics],
    state: OptState,
    corners: np.ndarray,
    config: RunConfig,
    level: int = 1,
) -> CostMap:
    """Warp target patches into each neighbor and compare features."""
    fmap = target.levels[level]
    stride = target.strides[level]
    h, w = state.inv_depth.shape
    s = config.patch_size
    corners = np.asarray(corners, dtype=np.int64)
    if (
        (corners < 0).any()
        or (corners[:, 0] > w - s).any()
        or (corners[:, 1] > h - s).any()
    ):
        raise DomainError("Patch corners must keep every patch inside the cost-map level")
    offsets = np.arange(s)
    cols = (corners[:, 0, None, None] + offsets[None, None, :]).repeat(s, axis=1)
    rows = (corners[:, 1, None, None] + offsets[None, :, None]).repeat(s, axis=2)
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    pixels = full_coordinates(np.stack([cols, rows], axis=1), stride)

    target_feats = getitem(fmap, (rows, cols))
    inv_depth = getitem(state.inv_depth, (rows, cols))
    residuals, rhos, valids = [], [], []
    for j, pyramid in enumerate(neighbors):
        warped = warp_patch(
            pixels,
            inv_depth,
            intrinsics_t,
            intrinsics_n[j],
            state.poses[j],
            pyramid.levels[level],
            stride=stride,
        )
        keep = warped.valid.astype(fmap.dtype)[:, None]
        r = (warped.features - target_feats) * keep
        rhos.append(_robust((r * r).sum(axis=1), config.robust_loss, config.charbonnier_eps))
        residuals.append(r)
        valids.append(warped.valid)

    valid = np.stack(valids)
    count = valid.sum(axis=0)
    denom = np.maximum(count, 1).astype(fmap.dtype)
    stacked = concat([reshape(r, (1,) + r.shape) for r in residuals], axis=0)
    rho = concat([reshape(r, (1, -1)) for r in rhos], axis=0)
    n_patches = len(corners)
    validity = valid.reshape(len(neighbors), n_patches, s * s).mean(axis=2)
    patch_mask = validity.max(axis=0) > 0
    if not patch_mask.all():
        logger.warning(f"Dropped {int((~patch_mask).sum())} patches unseen by any neighbor")
    return CostMap(
        residuals=stacked,
        mean_residual=stacked.sum(axis=0) / denom[:, None],
        rho=rho,
        cost=(rho * valid.astype(fmap.dtype)).sum(axis=0) / denom,
        valid=valid,
        validity=validity,
        patch_mask=patch_mask,
        target_features=target_feats,
        inv_depth=inv_depth,
        pixels=pixels,
        patch_size=s,
    )


def recurrent_update(
    state: OptState,
    cost: CostMap,
    target: FeaturePyramid,
    intrinsics_t: Intrinsics,
    params: Dict[str, Tensor],
    stats: RunningStats,
    config: RunConfig,
    training: bool = False,
    level: int = 1,
) -> OptState:
    """One GRU step producing capped pose and inverse-depth increments."""
    m, n_px, c = cost.residuals.shape
    patch_of_pixel = np.repeat(cost.patch_mask, cost.patch_size**2)
    valid = cost.valid & patch_of_pixel[None, :]
    if training:
        stats.update(cost.residuals.data[valid])
    weights = valid.astype(cost.residuals.dtype)[..., None]

    xhat = (cost.pixels[:, 0] - intrinsics_t.cx) / intrinsics_t.fx
    yhat = (cost.pixels[:, 1] - intrinsics_t.cy) / intrinsics_t.fy
    coords = np.broadcast_to(np.stack([xhat, yhat], axis=1), (m, n_px, 2))
    inputs = concat(
        [
            stats.normalize(cost.residuals) * weights,
            broadcast_to(reshape(cost.target_features, (1, n_px, c)), (m, n_px, c)),
            broadcast_to(reshape(cost.inv_depth, (1, n_px, 1)), (m, n_px, 1)),
            reshape(cost.rho, (m, n_px, 1)),
            Tensor(coords),
        ],
        axis=2,
    )
    flat = reshape(inputs, (m * n_px, -1))
    e = relu(linear(flat, params["pose.enc1.w"], params["pose.enc1.b"]))
    e = relu(linear(e, params["pose.enc2.w"], params["pose.enc2.b"]))
    e = reshape(e, (m, n_px, -1))

    share = weights / np.maximum(weights.sum(axis=1, keepdims=True), 1.0)
    pooled = concat(
        [
            (e * share).sum(axis=1),
            (e * (share * xhat[None, :, None])).sum(axis=1),
            (e * (share * yhat[None, :, None])).sum(axis=1),
        ],
        axis=1,
    )
    hidden = gru_cell(state.hidden, pooled, gru_params(params))

    step = tanh(linear(hidden, params["pose.head.w"], params["pose.head.b"]))
    if not np.isfinite(step.data).all():
        raise OptimizerDivergedError(state.iteration, "pose increment")
    poses = se3_exp_tensor(step * config.twist_cap) @ state.poses

    fmap = target.levels[level]
    h, w = state.inv_depth.shape
    context = broadcast_to(hidden.mean(axis=0, keepdims=True), (h * w, hidden.shape[1]))
    depth_in = concat(
        [reshape(fmap, (h * w, -1)), reshape(state.inv_depth, (h * w, 1)), context], axis=1
    )
    d = relu(linear(depth_in, params["pose.depth1.w"], params["pose.depth1.b"]))
    d = tanh(linear(d, params["pose.depth2.w"], params["pose.depth2.b"]))
    if not np.isfinite(d.data).all():
        raise OptimizerDivergedError(state.iteration, "depth increment")
    inv_depth = clip(
        state.inv_depth + reshape(d, (h, w)) * config.depth_cap,
        1.0 / config.far,
        1.0 / config.near,
    )
    logger.debug(
        f"Optimizer iteration {state.iteration + 1}: "
        f"|step| max {np.abs(step.data).max():.3e}, mean cost {cost.mean_cost:.4f}"
    )
    return OptState(poses, inv_depth, hidden, state.iteration + 1)


StepCallback = Callable[[OptState, Optional[CostMap]], None]


def optimize(
    target: FeaturePyramid,
    neighbors: Sequence[FeaturePyramid],
    intrinsics_t: Intrinsics,
    intrinsics_n: Sequence[Intrinsics],
    params: Dict[str, Tensor],
    stats: RunningStats,
    config: RunConfig,
    seed: int = 0,
    training: bool = False,
    init_poses: Optional[np.ndarray] = None,
    callback: Optional[StepCallback] = None,
    level: int = 1,
) -> OptState:
    """Run ``config.t_max`` recurrent updates from a fresh state.

    ``callback`` sees each state with the cost map it is refined from, and
    the final state with ``None``.
    """
    depth_shape = target.levels[level].shape[:2]
    state = init_state(len(neighbors), depth_shape, config, seed, init_poses)
    stride = target.strides[level]
    usable = (
        min(depth_shape[0], intrinsics_t.height // stride),
        min(depth_shape[1], intrinsics_t.width // stride),
    )
    rng = np.random.default_rng([seed, 1])
    corners = sample_patch_corners(rng, usable, config.patch_size, config.n_patches)
    for _ in range(config.t_max):
        cost = build_cost_map(
            target, neighbors, intrinsics_t, intrinsics_n, state, corners, config, level
        )
        if callback is not None:
            callback(state, cost)
        state = recurrent_update(
            state, cost, target, intrinsics_t, params, stats, config, training, level
        )
    if callback is not None:
        callback(state, None)
    return state


def upsample_inverse_depth(inv_depth: Tensor, stride: int, height: int, width: int) -> Tensor:
    """Nearest upsampling of a level map to full resolution (stride a power of 2)."""
    h, w = inv_depth.shape
    x = reshape(inv_depth, (1, 1, h, w))
    factor = 1
    while factor < stride:
        x = upsample2x(x)
        factor *= 2
    return reshape(x, x.shape[2:])[:height, :width]
