"""Joint pretraining, fine-tuning, evaluation and rendering entry points."""

import logging
from dataclasses import dataclass
from math import isqrt
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .autodiff import Tape, Tensor, backward, default_dtype
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    DegenerateAlignmentError,
    OptimizerDivergedError,
    SplitViolationError,
    TrainingHaltedError,
    UndefinedLossError,
)
from .geometry import DepthMap, Intrinsics, SE3Pose, save_poses
from .image_io import load_image_folder, write_depth, write_image
from .losses import (
    batch_pose_error,
    loss_depth_smooth,
    loss_final,
    loss_photo_warp,
    loss_rgb,
    psnr,
    schedule_weight,
    ssim,
)
from .models import (
    METRICS_COLUMNS,
    TRAJECTORY_COLUMNS,
    RunConfig,
    SceneSpec,
    architecture_hash,
    save_config,
    split_views,
)
from .pose_optimizer import (
    CostMap,
    OptState,
    RunningStats,
    init_optimizer_params,
    optimize,
    upsample_inverse_depth,
)
from .renderer import (
    SourceView,
    extract_pyramid,
    init_pyramid_params,
    init_renderer_params,
    render_image,
    render_rays,
)
from .scene_graph import (
    SceneGraph,
    build_scene_graph,
    graph_from_matches,
    load_match_file,
    ranking_agreement,
    save_scene_graph,
    select_neighbors,
)
from .synth import (
    SyntheticScene,
    covisibility,
    make_scene,
    render_views,
    sample_trajectory,
)

logger = logging.getLogger(__name__)

GROUPS = ("feature", "renderer", "pose")
COST_LEVEL = 1


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass(eq=False)
class DbarfModel:
    """Feature pyramid, renderer and pose-optimizer parameters."""

    params: Dict[str, Tensor]
    stats: RunningStats
    config_hash: str

    def group(self, name: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if group_of(k) == name}

    def to_tensors(self) -> Dict[str, np.ndarray]:
        tensors = {k: v.data for k, v in self.params.items()}
        tensors["stats.mean"] = np.asarray(self.stats.mean, dtype=np.float64)
        tensors["stats.var"] = np.asarray(self.stats.var, dtype=np.float64)
        tensors["stats.count"] = np.array(self.stats.count, dtype=np.int64)
        return tensors

    def checkpoint(self, step: int, metadata: Optional[dict] = None) -> Checkpoint:
        return Checkpoint(self.config_hash, step, self.to_tensors(), dict(metadata or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: RunConfig) -> "DbarfModel":
        tensors = dict(ckpt.tensors)
        stats = RunningStats(
            mean=tensors.pop("stats.mean"),
            var=tensors.pop("stats.var"),
            count=int(tensors.pop("stats.count")),
            momentum=config.stats_momentum,
        )
        params = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in tensors.items()}
        return cls(params, stats, ckpt.config_hash)


def build_model(config: RunConfig, seed: Optional[int] = None) -> DbarfModel:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    c0, c1, _ = config.feature_channels
    params = {}
    params.update(init_pyramid_params(rng, config.feature_channels))
    params.update(
        init_renderer_params(rng, 3 + c0, config.aggregate_dim, config.renderer_hidden)
    )
    params.update(init_optimizer_params(rng, c1, config.encoder_dim, config.gru_hidden))
    stats = RunningStats.create(c1, config.stats_momentum)
    model = DbarfModel(params, stats, architecture_hash(config))
    count = sum(p.size for p in params.values())
    logger.info(f"Built model with {len(params)} tensors, {count} parameters")
    return model


class Adam:
    """Moment-based updates with per-group rates and gradient-norm clipping."""

    def __init__(
        self,
        params: Dict[str, Tensor],
        rates: Dict[str, float],
        clip: float = 1.0,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.rates = rates
        self.clip = clip
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> Dict[str, float]:
        """Apply one update; returns the pre-clip gradient norm of each group."""
        self.t += 1
        norms = {}
        for group, rate in self.rates.items():
            names = [k for k in self.params if group_of(k) == group and k in grads]
            norm = float(np.sqrt(sum(np.sum(grads[k] ** 2) for k in names)))
            norms[group] = norm
            scale = min(1.0, self.clip / (norm + 1e-12))
            for k in names:
                g = grads[k] * scale
                self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
                self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
                m_hat = self.m[k] / (1 - self.beta1**self.t)
                v_hat = self.v[k] / (1 - self.beta2**self.t)
                p = self.params[k]
                p.data = (p.data - rate * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                    p.data.dtype
                )
        return norms


@dataclass(eq=False)
class SceneData:
    seed: int
    intrinsics: Intrinsics
    images: List[np.ndarray]
    depths: Optional[List[DepthMap]]
    poses: Optional[List[SE3Pose]]
    train_views: List[int]
    heldout_views: List[int]
    graph: SceneGraph
    scene: Optional[SyntheticScene] = None


def scene_graph_for(
    images: Sequence[np.ndarray], intrinsics: Optional[Intrinsics], config: RunConfig, seed: int
) -> SceneGraph:
    """Scene graph from imported matches when configured, else from keypoints."""
    if config.match_file:
        return graph_from_matches(
            load_match_file(config.match_file),
            len(images),
            intrinsics,
            config.min_matches,
            config.ransac_threshold,
            config.ransac_iterations,
            seed,
        )
    return build_scene_graph(
        images,
        intrinsics,
        min_matches=config.min_matches,
        max_keypoints=config.max_keypoints,
        nms_radius=config.nms_radius,
        ratio=config.ratio_test,
        threshold=config.ransac_threshold,
        iterations=config.ransac_iterations,
        seed=seed,
        max_workers=config.workers,
    )


def prepare_scene(seed: int, config: RunConfig) -> SceneData:
    """Synthesize a scene, its views and its scene graph."""
    spec = config.scene_spec(seed)
    scene = make_scene(spec)
    intrinsics = scene.intrinsics()
    poses = sample_trajectory(scene, spec.n_views)
    images, depths = render_views(scene, poses, intrinsics)
    graph = scene_graph_for(images, intrinsics, config, seed)
    train, heldout = split_views(len(images), config.holdout_every)
    return SceneData(seed, intrinsics, images, depths, poses, train, heldout, graph, scene)


def choose_neighbors(
    scene: SceneData, target: int, k: int, allowed: Sequence[int]
) -> List[int]:
    """Top-``k`` scene-graph neighbors among ``allowed`` views.

    Views isolated among ``allowed`` fall back to the nearest views in capture order.
    """
    pool = set(allowed) - {target}
    ranked = select_neighbors(scene.graph, target, k, pool)
    if ranked:
        return ranked
    logger.warning(f"Taking neighbors of view {target} in capture order")
    return sorted(pool, key=lambda j: (abs(j - target), j))[:k]


class SplitAudit:
    """Asserts that held-out views never enter a training batch."""

    def __init__(self, heldout: Dict[int, Sequence[int]]):
        self.heldout = {seed: set(views) for seed, views in heldout.items()}
        self.batches = 0

    def check(self, scene_seed: int, views: Sequence[int]) -> None:
        leaked = self.heldout.get(scene_seed, set()) & set(views)
        if leaked:
            raise SplitViolationError(
                f"Held-out views {sorted(leaked)} of scene {scene_seed} in a training batch"
            )
        self.batches += 1


def downsample_image(image: np.ndarray, stride: int, shape: Tuple[int, int]) -> np.ndarray:
    """Box-filter an image onto a level grid of ``shape`` (padding with zeros)."""
    h, w = shape
    padded = np.zeros((h * stride, w * stride, image.shape[2]))
    crop = image[: h * stride, : w * stride]
    padded[: crop.shape[0], : crop.shape[1]] = crop
    return padded.reshape(h, stride, w, stride, -1).mean(axis=(1, 3))


def sample_ray_crop(
    rng: np.random.Generator, intrinsics: Intrinsics, n_rays: int
) -> Tuple[np.ndarray, Tuple[int, int], Tuple[slice, slice]]:
    """Square pixel crop of about ``n_rays`` pixels, so SSIM can be measured."""
    side = max(1, isqrt(n_rays))
    ch, cw = min(side, intrinsics.height), min(side, intrinsics.width)
    y0 = int(rng.integers(0, intrinsics.height - ch + 1))
    x0 = int(rng.integers(0, intrinsics.width - cw + 1))
    uu, vv = np.meshgrid(np.arange(x0, x0 + cw, dtype=np.float64), np.arange(y0, y0 + ch, dtype=np.float64))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    return pixels, (ch, cw), (slice(y0, y0 + ch), slice(x0, x0 + cw))


def _pose_metrics(scene: SceneData, target: int, neighbors: Sequence[int], poses: np.ndarray):
    if scene.poses is None:
        return float("nan"), float("nan")
    try:
        report = batch_pose_error(
            poses, scene.poses[target], [scene.poses[j] for j in neighbors]
        )
    except DegenerateAlignmentError as exc:
        logger.debug(f"Pose error undefined for view {target}: {exc}")
        return float("nan"), float("nan")
    return report.mean_rot_err_deg, report.mean_trans_err


def _batch_losses(scene, target, neighbors, state, rgb, ray_mask, pyramid, gt, config):
    intrinsics = scene.intrinsics
    h, w = intrinsics.height, intrinsics.width
    stride = pyramid.strides[COST_LEVEL]
    l_rgb = loss_rgb(rgb, gt.reshape(-1, 3), ray_mask)
    full_inv = upsample_inverse_depth(state.inv_depth, stride, h, w)
    l_photo = loss_photo_warp(
        scene.images[target],
        [scene.images[j] for j in neighbors],
        state.poses,
        full_inv,
        intrinsics,
        [intrinsics] * len(neighbors),
        config.alpha,
    )
    small = downsample_image(scene.images[target], stride, state.inv_depth.shape)
    # Level cells past the image edge only see padding.
    inside = np.zeros(state.inv_depth.shape, dtype=bool)
    inside[: h // stride, : w // stride] = True
    l_depth = loss_depth_smooth(state.inv_depth, small, inside)
    return l_rgb, l_depth, l_photo


def train_step(
    model: DbarfModel,
    adam: Adam,
    scene: SceneData,
    target: int,
    neighbors: Sequence[int],
    step: int,
    config: RunConfig,
    rng: np.random.Generator,
) -> Tuple[dict, Dict[str, float]]:
    """One joint update of feature extractor, renderer and pose optimizer."""
    intrinsics = scene.intrinsics
    with Tape() as tape:
        pyr_t = extract_pyramid(scene.images[target], model.params, target)
        pyr_n = [extract_pyramid(scene.images[j], model.params, j) for j in neighbors]
        state = optimize(
            pyr_t,
            pyr_n,
            intrinsics,
            [intrinsics] * len(neighbors),
            model.params,
            model.stats,
            config,
            seed=int(rng.integers(2**31)),
            training=True,
        )
        pixels, crop_shape, crop = sample_ray_crop(rng, intrinsics, config.ray_batch)
        sources = [
            SourceView(scene.images[j], intrinsics, pyr) for j, pyr in zip(neighbors, pyr_n)
        ]
        render = render_rays(
            pixels,
            intrinsics,
            sources,
            state.poses,
            model.params,
            config.near,
            config.far,
            config.n_samples,
        )
        gt = scene.images[target][crop]
        pixel_mask = (
            scene.depths[target].valid[crop].ravel()
            if scene.depths is not None
            else np.ones(len(pixels), dtype=bool)
        )
        parts = _batch_losses(
            scene,
            target,
            neighbors,
            state,
            render.rgb,
            render.ray_valid & pixel_mask,
            pyr_t,
            gt,
            config,
        )
        final, report = loss_final(*parts, t=step, beta=config.beta)
    if not np.isfinite(final.data):
        raise FloatingPointError(f"Non-finite loss {report.l_final}")
    names = list(model.params)
    grads = backward(tape, final, inputs=[model.params[k] for k in names])
    for name, g in zip(names, grads):
        if not np.isfinite(g).all():
            raise FloatingPointError(f"Non-finite gradient for {name}")
    norms = adam.step(dict(zip(names, grads)))

    prediction = np.clip(render.rgb.data.reshape(crop_shape + (3,)), 0.0, 1.0)
    rot_err, trans_err = _pose_metrics(scene, target, neighbors, state.poses.data)
    metrics = {
        "psnr": psnr(prediction, gt),
        "ssim": ssim(prediction, gt),
        "rot_err_deg": rot_err,
        "trans_err": trans_err,
        **{f"grad_{k}": v for k, v in norms.items()},
    }
    return report, metrics


def write_metrics(rows: List[dict], path: Union[str, Path]) -> pd.DataFrame:
    df = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    df.to_csv(path, index=False)
    return df


def _metrics_row(step: int, report, metrics: Dict[str, float]) -> dict:
    return {
        "step": step,
        "psnr": metrics["psnr"],
        "ssim": metrics["ssim"],
        "l_rgb": report.l_rgb,
        "l_depth": report.l_depth,
        "l_photo": report.l_photo,
        "w": report.w,
        "rot_err_deg": metrics["rot_err_deg"],
        "trans_err": metrics["trans_err"],
    }


def train_loop(
    model: DbarfModel,
    scenes: Sequence[SceneData],
    config: RunConfig,
    rates: Dict[str, float],
    iterations: int,
    out_dir: Path,
    start_step: int = 0,
    metadata: Optional[dict] = None,
    seed: int = 0,
) -> Path:
    """Alternate batches over ``scenes``; returns the final checkpoint path."""
    adam = Adam(model.params, rates, clip=config.grad_clip)
    rng = np.random.default_rng(seed)
    audit = SplitAudit({s.seed: s.heldout_views for s in scenes})
    rows: List[dict] = []
    checkpoint_path = out_dir / "checkpoint.dbrf"
    metrics_path = out_dir / "metrics.csv"
    step = start_step
    for i in range(iterations):
        step = start_step + i
        scene = scenes[int(rng.integers(len(scenes)))]
        target = int(rng.choice(scene.train_views))
        neighbors = choose_neighbors(scene, target, config.n_views_train, scene.train_views)
        audit.check(scene.seed, [target, *neighbors])
        try:
            report, metrics = train_step(model, adam, scene, target, neighbors, step, config, rng)
        except UndefinedLossError as exc:
            logger.warning(f"Skipping step {step}: {exc}")
            continue
        except (OptimizerDivergedError, FloatingPointError) as exc:
            halt_path = out_dir / "checkpoint_last_good.dbrf"
            save_checkpoint(model.checkpoint(step, metadata), halt_path)
            write_metrics(rows, metrics_path)
            raise TrainingHaltedError(step, str(exc), str(halt_path)) from exc
        rows.append(_metrics_row(step, report, metrics))
        if (i + 1) % config.log_every == 0:
            logger.info(
                f"Step {step}: psnr {metrics['psnr']:.2f} ssim {metrics['ssim']:.3f} "
                f"loss {report.l_final:.4f} w {report.w:.4f} "
                f"rot {metrics['rot_err_deg']:.3f} deg"
            )
        if (i + 1) % config.checkpoint_every == 0:
            save_checkpoint(model.checkpoint(step + 1, metadata), checkpoint_path)
            write_metrics(rows, metrics_path)
    final_step = start_step + iterations
    save_checkpoint(model.checkpoint(final_step, metadata), checkpoint_path)
    write_metrics(rows, metrics_path)
    logger.info(f"Split audit passed for {audit.batches} training batches")
    return checkpoint_path


def cmd_pretrain(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Jointly train all subsystems across ``config.scenes``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    with default_dtype(config.dtype):
        model = build_model(config)
        scenes = [prepare_scene(seed, config) for seed in config.scenes]
        for scene in scenes:
            save_scene_graph(out / f"scene_graph_{scene.seed}.txt", scene.graph)
        metadata = {"stage": "pretrain", "scenes": list(config.scenes), "seed": config.seed}
        return train_loop(
            model,
            scenes,
            config,
            config.pretrain_rates(),
            config.pretrain_iters,
            out,
            metadata=metadata,
            seed=config.seed,
        )


def load_model(checkpoint_path: Union[str, Path], config: RunConfig) -> Tuple[DbarfModel, Checkpoint]:
    ckpt = load_checkpoint(checkpoint_path, expected_hash=architecture_hash(config))
    return DbarfModel.from_checkpoint(ckpt, config), ckpt


def cmd_finetune(
    checkpoint_path: Union[str, Path], scene_seed: int, config: RunConfig, out_dir: Union[str, Path]
) -> Path:
    """Continue training on one scene with the fine-tuning rates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    with default_dtype(config.dtype):
        model, ckpt = load_model(checkpoint_path, config)
        scene = prepare_scene(scene_seed, config)
        metadata = dict(ckpt.metadata)
        metadata.update({"stage": "finetune", "scene": scene_seed, "parent_step": ckpt.step})
        return train_loop(
            model,
            [scene],
            config,
            config.finetune_rates(),
            config.finetune_iters,
            out,
            start_step=ckpt.step,
            metadata=metadata,
            seed=config.seed,
        )


class TrajectoryRecorder:
    """Optimizer callback collecting per-iteration pose errors and costs."""

    def __init__(self, mode: str, scene: SceneData, target: int, neighbors: Sequence[int]):
        self.mode = mode
        self.scene = scene
        self.target = target
        self.neighbors = list(neighbors)
        self.rows: List[dict] = []

    def __call__(self, state: OptState, cost: Optional[CostMap]) -> None:
        rot = [float("nan")] * len(self.neighbors)
        trans = list(rot)
        if self.scene.poses is not None:
            try:
                report = batch_pose_error(
                    state.poses.data,
                    self.scene.poses[self.target],
                    [self.scene.poses[j] for j in self.neighbors],
                )
                rot, trans = report.rot_errors_deg[1:], report.trans_errors[1:]
            except DegenerateAlignmentError:
                pass
        mean_cost = cost.mean_cost if cost is not None else float("nan")
        for k, j in enumerate(self.neighbors):
            self.rows.append(
                {
                    "mode": self.mode,
                    "target": self.target,
                    "neighbor": j,
                    "iteration": state.iteration,
                    "rot_err_deg": rot[k],
                    "trans_err": trans[k],
                    "mean_cost": mean_cost,
                }
            )


def _render_view(model, scene, target, neighbors, pyramids, config, recorder=None):
    intrinsics = scene.intrinsics
    state = optimize(
        pyramids[target],
        [pyramids[j] for j in neighbors],
        intrinsics,
        [intrinsics] * len(neighbors),
        model.params,
        model.stats,
        config,
        seed=config.seed + target,
        callback=recorder,
    )
    sources = [SourceView(scene.images[j], intrinsics, pyramids[j]) for j in neighbors]
    rgb, depth, valid = render_image(
        intrinsics, sources, state.poses, model.params, config.near, config.far, config.n_samples
    )
    return state, np.clip(rgb, 0.0, 1.0), depth, valid


def evaluate_scene(
    model: DbarfModel, scene: SceneData, config: RunConfig, out_dir: Union[str, Path], step: int = 0
) -> pd.DataFrame:
    """Render held-out views and report image quality and pose errors."""
    out = Path(out_dir)
    pyramids = {i: extract_pyramid(im, model.params, i) for i, im in enumerate(scene.images)}
    if scene.poses is None:
        logger.warning("No ground-truth poses; reporting image quality only")
    rows, trajectories = [], []
    for target in scene.heldout_views:
        neighbors = choose_neighbors(scene, target, config.n_views_eval, scene.train_views)
        recorder = TrajectoryRecorder("dbarf", scene, target, neighbors)
        state, rgb, depth, valid = _render_view(
            model, scene, target, neighbors, pyramids, config, recorder
        )
        gt = scene.images[target]
        try:
            parts = _batch_losses(
                scene,
                target,
                neighbors,
                state,
                Tensor(rgb.reshape(-1, 3)),
                valid.ravel(),
                pyramids[target],
                gt,
                config,
            )
            l_rgb, l_depth, l_photo = (p.item() for p in parts)
        except UndefinedLossError as exc:
            logger.warning(f"Losses undefined for view {target}: {exc}")
            l_rgb = l_depth = l_photo = float("nan")
        rot_err, trans_err = _pose_metrics(scene, target, neighbors, state.poses.data)
        write_image(out / "images" / f"view_{target:03d}.png", rgb)
        write_depth(out / "depths" / f"view_{target:03d}.png", depth, valid, config.far)
        rows.append(
            {
                "step": step,
                "psnr": psnr(rgb, gt),
                "ssim": ssim(rgb, gt),
                "l_rgb": l_rgb,
                "l_depth": l_depth,
                "l_photo": l_photo,
                "w": schedule_weight(step, config.beta),
                "rot_err_deg": rot_err,
                "trans_err": trans_err,
            }
        )
        trajectories.extend(recorder.rows)
        logger.info(
            f"View {target}: psnr {rows[-1]['psnr']:.2f} ssim {rows[-1]['ssim']:.3f} "
            f"rot {rot_err:.3f} deg trans x100 {trans_err * 100:.3f}"
        )
    df = write_metrics(rows, out / "metrics.csv")
    pd.DataFrame(trajectories, columns=TRAJECTORY_COLUMNS).to_csv(
        out / "trajectories.csv", index=False
    )
    return df


def cmd_evaluate(
    checkpoint_path: Union[str, Path], scene_seed: int, config: RunConfig, out_dir: Union[str, Path]
) -> pd.DataFrame:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with default_dtype(config.dtype):
        model, ckpt = load_model(checkpoint_path, config)
        scene = prepare_scene(scene_seed, config)
        return evaluate_scene(model, scene, config, out, step=ckpt.step)


def cmd_render(
    checkpoint_path: Union[str, Path],
    scene_seed: int,
    view: int,
    config: RunConfig,
    out_dir: Union[str, Path],
) -> Path:
    """Render one view of a scene from its graph neighbors."""
    out = Path(out_dir)
    with default_dtype(config.dtype):
        model, _ = load_model(checkpoint_path, config)
        scene = prepare_scene(scene_seed, config)
        if not 0 <= view < len(scene.images):
            raise ValueError(f"View {view} outside scene with {len(scene.images)} views")
        neighbors = choose_neighbors(
            scene, view, config.n_views_eval, range(len(scene.images))
        )
        pyramids = {
            i: extract_pyramid(scene.images[i], model.params, i) for i in [view, *neighbors]
        }
        _, rgb, depth, valid = _render_view(model, scene, view, neighbors, pyramids, config)
    image_path = out / "images" / f"view_{view:03d}.png"
    write_image(image_path, rgb)
    write_depth(out / "depths" / f"view_{view:03d}.png", depth, valid, config.far)
    logger.info(f"Rendered view {view} of scene {scene_seed} to {image_path}")
    return image_path


def cmd_make_scene(spec: SceneSpec, out_dir: Union[str, Path]) -> Path:
    """Write a synthetic scene as an image folder with its ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_scene(spec)
    intrinsics = scene.intrinsics()
    poses = sample_trajectory(scene, spec.n_views)
    images, depths = render_views(scene, poses, intrinsics)
    for i, (image, depth) in enumerate(zip(images, depths)):
        write_image(out / "images" / f"view_{i:03d}.png", image)
        write_depth(
            out / "depths" / f"view_{i:03d}.png", depth.depth, depth.valid, 2 * spec.depth_max
        )
    save_poses(out / "poses.txt", poses)
    np.savetxt(
        out / "intrinsics.txt",
        [[intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy]],
        fmt="%.17g",
    )
    save_config(spec, out / "scene.yaml")
    logger.info(f"Wrote scene {spec.seed} with {len(images)} views to {out}")
    return out


def cmd_scene_graph(
    config: RunConfig,
    out_dir: Union[str, Path],
    scene_seed: int = 0,
    images_dir: Optional[Union[str, Path]] = None,
) -> SceneGraph:
    """Build and save the scene graph of a synthetic scene or an image folder."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if images_dir is not None:
        folder = load_image_folder(images_dir)
        graph = scene_graph_for(folder.images, folder.intrinsics, config, config.seed)
    else:
        scene = prepare_scene(scene_seed, config)
        graph = scene.graph
        tau = ranking_agreement(graph, covisibility(scene.depths, scene.poses, scene.intrinsics))
        logger.info(f"Neighbor ranking agrees with covisibility: Kendall tau {tau:.3f}")
    for i in range(graph.n_images):
        logger.debug(f"View {i}: {graph.neighbors(i)}")
    save_scene_graph(out / "scene_graph.txt", graph)
    return graph
