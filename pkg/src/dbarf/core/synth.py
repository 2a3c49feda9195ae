"""Procedural planar scenes with analytic ground truth."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateViewError
from .geometry import DepthMap, Intrinsics, SE3Pose, look_at, se3_exp
from .models import SceneSpec

logger = logging.getLogger(__name__)

LATTICE = 64


@dataclass(eq=False)
class ValueNoiseTexture:
    """Multi-octave value noise, three colour channels in [0, 1]."""

    lattices: np.ndarray  # (octaves, 3, LATTICE, LATTICE)
    frequency: float

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        """Colour at (..., 2) in-plane coordinates (scene units)."""
        out = np.zeros(coords.shape[:-1] + (3,))
        total = 0.0
        for octave, lattice in enumerate(self.lattices):
            amplitude = 0.5**octave
            scaled = coords * (self.frequency * 2**octave)
            out += amplitude * _interpolate(lattice, scaled)
            total += amplitude
        return out / total


def _interpolate(lattice: np.ndarray, scaled: np.ndarray) -> np.ndarray:
    base = np.floor(scaled)
    frac = scaled - base
    smooth = frac * frac * (3.0 - 2.0 * frac)
    i0 = base.astype(np.int64) % LATTICE
    i1 = (i0 + 1) % LATTICE
    sx, sy = smooth[..., 0, None], smooth[..., 1, None]

    def corner(ix, iy):
        return np.moveaxis(lattice[:, iy, ix], 0, -1)

    top = corner(i0[..., 0], i0[..., 1]) * (1 - sx) + corner(i1[..., 0], i0[..., 1]) * sx
    bottom = (
        corner(i0[..., 0], i1[..., 1]) * (1 - sx) + corner(i1[..., 0], i1[..., 1]) * sx
    )
    return top * (1 - sy) + bottom * sy


@dataclass(eq=False)
class TexturedPlane:
    """Rectangle on the plane ``normal . x = offset`` centred at ``origin``."""

    normal: np.ndarray
    offset: float
    origin: np.ndarray
    axes: np.ndarray  # (2, 3) in-plane unit vectors
    half_extent: np.ndarray  # (2,)
    texture: ValueNoiseTexture

    def corners(self) -> np.ndarray:
        signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
        return self.origin + (signs * self.half_extent) @ self.axes


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    planes: List[TexturedPlane]
    bounds: np.ndarray = field(default=None)  # (2, 3) world min/max

    @property
    def seed(self) -> int:
        return self.spec.seed

    @property
    def center(self) -> np.ndarray:
        return np.array([0.0, 0.0, 0.5 * (self.spec.depth_min + self.spec.depth_max)])

    @property
    def diameter(self) -> float:
        """Distance from the trajectory origin to the backdrop."""
        return float(self.spec.depth_max)

    def intrinsics(self) -> Intrinsics:
        return scene_intrinsics(self.spec)


def scene_intrinsics(spec: SceneSpec) -> Intrinsics:
    return Intrinsics(
        fx=spec.focal,
        fy=spec.focal,
        cx=(spec.image_width - 1) / 2.0,
        cy=(spec.image_height - 1) / 2.0,
        width=spec.image_width,
        height=spec.image_height,
    )


def oracle_scene_spec(seed: int = 0, **overrides) -> SceneSpec:
    """A single fronto-parallel backdrop with a band-limited texture.

    Two octaves at frequency 0.5 keep the texture smooth over many pixels, so
    warping one view into another with exact poses and exact depth leaves
    only bilinear interpolation error (around 1e-4 per pixel). Any field can
    be overridden.
    """
    fields = dict(
        seed=seed,
        plane_count=1,
        fronto_parallel=True,
        texture_octaves=2,
        texture_frequency=0.5,
        trajectory="arc",
    )
    fields.update(overrides)
    return SceneSpec(**fields)


def _make_texture(rng: np.random.Generator, spec: SceneSpec) -> ValueNoiseTexture:
    lattices = rng.uniform(0.0, 1.0, (spec.texture_octaves, 3, LATTICE, LATTICE))
    return ValueNoiseTexture(lattices=lattices, frequency=spec.texture_frequency)


def _plane(normal, origin, up_hint, half_extent, texture) -> TexturedPlane:
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    u = np.cross(up_hint, normal)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return TexturedPlane(
        normal=normal,
        offset=float(normal @ origin),
        origin=np.asarray(origin, dtype=np.float64),
        axes=np.stack([u, v]),
        half_extent=np.asarray(half_extent, dtype=np.float64),
        texture=texture,
    )


def make_scene(spec: SceneSpec) -> SyntheticScene:
    """Backdrop plane at ``depth_max`` plus up to three tilted rectangles."""
    rng = np.random.default_rng(spec.seed)
    up_hint = np.array([0.0, 1.0, 0.0])
    tan_half = max(spec.image_width, spec.image_height) / (2.0 * spec.focal)
    backdrop_half = spec.depth_max * tan_half * 2.0 + spec.depth_max
    planes = [
        _plane(
            [0.0, 0.0, 1.0],
            np.array([0.0, 0.0, spec.depth_max]),
            up_hint,
            [backdrop_half, backdrop_half],
            _make_texture(rng, spec),
        )
    ]
    for _ in range(spec.plane_count - 1):
        depth = rng.uniform(spec.depth_min, spec.depth_max * 0.9)
        reach = depth * tan_half
        origin = np.array(
            [rng.uniform(-0.5, 0.5) * reach, rng.uniform(-0.5, 0.5) * reach, depth]
        )
        if spec.fronto_parallel:
            normal = np.array([0.0, 0.0, 1.0])
        else:
            tilt = se3_exp(np.r_[rng.uniform(-0.5, 0.5, 2), 0.0, 0.0, 0.0, 0.0])
            normal = tilt.rotation @ np.array([0.0, 0.0, 1.0])
        half = rng.uniform(0.3, 0.6, 2) * reach
        planes.append(_plane(normal, origin, up_hint, half, _make_texture(rng, spec)))

    corners = np.concatenate([p.corners() for p in planes])
    bounds = np.stack([corners.min(axis=0), corners.max(axis=0)])
    logger.info(f"Built scene {spec.seed} with {len(planes)} planes")
    return SyntheticScene(spec=spec, planes=planes, bounds=bounds)


def gt_render(
    scene: SyntheticScene,
    pose: SE3Pose,
    intrinsics: Optional[Intrinsics] = None,
    dims: Optional[Tuple[int, int]] = None,
) -> Tuple[np.ndarray, DepthMap]:
    """Ray-cast the planes; returns an (H,W,3) image and exact inverse depth."""
    intrinsics = intrinsics or scene.intrinsics()
    h, w = dims or (intrinsics.height, intrinsics.width)
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays = intrinsics.ray_directions(np.stack([uu.ravel(), vv.ravel()], axis=1))
    directions = rays @ pose.rotation
    center = pose.center

    best = np.full(len(rays), np.inf)
    image = np.zeros((len(rays), 3))
    for plane in scene.planes:
        height = plane.normal @ center - plane.offset
        if abs(height) < 1e-9:
            raise DegenerateViewError(f"Camera lies on a plane of scene {scene.seed}")
        denom = directions @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(np.abs(denom) > 1e-12, -height / denom, np.inf)
        hits = center + lam[:, None] * directions
        local = np.nan_to_num((hits - plane.origin) @ plane.axes.T, posinf=0.0)
        inside = (
            (lam > 1e-9)
            & np.isfinite(lam)
            & (np.abs(local) <= plane.half_extent).all(axis=1)
            & (lam < best)
        )
        if inside.any():
            best[inside] = lam[inside]
            image[inside] = plane.texture(local[inside])

    valid = np.isfinite(best)
    inv = np.zeros(len(rays))
    inv[valid] = 1.0 / best[valid]
    background = int((~valid).sum())
    if background:
        logger.debug(f"{background} background pixels flagged")
    return image.reshape(h, w, 3), DepthMap(inv.reshape(h, w), valid.reshape(h, w))


def sample_trajectory(
    scene: SyntheticScene, n: int, style: Optional[str] = None
) -> List[SE3Pose]:
    """Forward-facing arc (about the vertical axis) or orbit looking at the scene."""
    if n < 2:
        raise ValueError(f"A trajectory needs at least 2 views, got {n}")
    style = style or scene.spec.trajectory
    target = scene.center
    poses = []
    if style == "arc":
        span = np.deg2rad(scene.spec.arc_span_deg)
        radius = target[2]
        for angle in np.linspace(-span / 2, span / 2, n):
            offset = np.array([np.sin(angle), 0.0, -np.cos(angle)]) * radius
            poses.append(look_at(target + offset, target))
    elif style == "orbit":
        rho = scene.spec.orbit_radius
        for phi in np.linspace(0.0, 2 * np.pi, n, endpoint=False):
            position = np.array([rho * np.cos(phi), rho * np.sin(phi), 0.0])
            poses.append(look_at(position, target))
    else:
        raise ValueError(f"Unknown trajectory style {style}")
    return poses


def perturb_poses(
    poses: Sequence[SE3Pose],
    rot_deg: float,
    trans_frac: float,
    seed: int,
    diameter: float = 1.0,
) -> List[SE3Pose]:
    """Left-multiply each pose by a random rigid motion.

    Rotation angles are uniform in ``[0, rot_deg]`` about a random axis and
    translation lengths uniform in ``[0, trans_frac * diameter]``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for pose in poses:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(rng.uniform(0.0, rot_deg))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        shift = direction * rng.uniform(0.0, trans_frac * diameter)
        rotation = se3_exp(np.r_[axis * angle, 0.0, 0.0, 0.0]).rotation
        out.append(SE3Pose(rotation, shift).compose(pose))
    return out


def covisibility(
    depths: Sequence[DepthMap], poses: Sequence[SE3Pose], intrinsics: Intrinsics
) -> np.ndarray:
    """Fraction of view i's surface pixels that land inside view j (no occlusion)."""
    n = len(poses)
    out = np.eye(n)
    h, w = depths[0].inv_depth.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    rays = intrinsics.ray_directions(pixels)
    for i in range(n):
        valid = depths[i].valid.ravel()
        if not valid.any():
            continue
        cam = rays[valid] / depths[i].inv_depth.ravel()[valid, None]
        world = poses[i].inverse().apply(cam)
        for j in range(n):
            if i == j:
                continue
            pj = poses[j].apply(world)
            z = pj[:, 2]
            front = z > 1e-6
            u = intrinsics.fx * pj[front, 0] / z[front] + intrinsics.cx
            v = intrinsics.fy * pj[front, 1] / z[front] + intrinsics.cy
            seen = (u >= -0.5) & (u <= w - 0.5) & (v >= -0.5) & (v <= h - 0.5)
            out[i, j] = seen.sum() / len(z)
    return out


def render_views(
    scene: SyntheticScene, poses: Sequence[SE3Pose], intrinsics: Intrinsics
) -> Tuple[List[np.ndarray], List[DepthMap]]:
    images, depths = [], []
    for pose in poses:
        image, depth = gt_render(scene, pose, intrinsics)
        images.append(image)
        depths.append(depth)
    return images, depths
