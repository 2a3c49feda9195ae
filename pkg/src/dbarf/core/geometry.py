"""Rigid-body geometry on SE(3), pinhole projection and patch warping."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    Tensor,
    bilinear_sample,
    concat,
    matmul,
    reshape,
    stack,
    swapaxes,
)
from .errors import DomainError, IllConditionedLogError

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
SERIES_THRESHOLD = 1e-2


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=np.float64
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]], dtype=np.float64)


@dataclass(eq=False)
class SE3Pose:
    """World-to-camera rigid transform ``x_cam = R x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: Union[np.ndarray, Tensor]) -> "SE3Pose":
        m = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """``self ∘ other``: apply ``other`` first."""
        return SE3Pose.from_matrix(self.matrix() @ other.matrix())

    def inverse(self) -> "SE3Pose":
        rt = self.rotation.T
        return SE3Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
            and np.isfinite(self.translation).all()
        )


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, stride: int) -> "Intrinsics":
        """Intrinsics of a pyramid level subsampled by ``stride``."""
        return Intrinsics(
            fx=self.fx / stride,
            fy=self.fy / stride,
            cx=(self.cx + 0.5) / stride - 0.5,
            cy=(self.cy + 0.5) / stride - 0.5,
            width=self.width // stride,
            height=self.height // stride,
        )

    def ray_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Camera-frame directions with unit z for (N,2) pixel coordinates."""
        pixels = np.asarray(pixels, dtype=np.float64)
        return np.stack(
            [
                (pixels[:, 0] - self.cx) / self.fx,
                (pixels[:, 1] - self.cy) / self.fy,
                np.ones(len(pixels)),
            ],
            axis=1,
        )


@dataclass(eq=False)
class DepthMap:
    """Per-pixel inverse depth with a validity mask."""

    inv_depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.inv_depth = np.asarray(self.inv_depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.inv_depth.shape != self.valid.shape:
            raise ValueError("Inverse depth and validity mask differ in shape")
        bad = self.valid & ~(np.isfinite(self.inv_depth) & (self.inv_depth > 0))
        if bad.any():
            raise DomainError("Valid inverse depths must be finite and positive")

    @property
    def depth(self) -> np.ndarray:
        out = np.full(self.inv_depth.shape, np.inf)
        out[self.valid] = 1.0 / self.inv_depth[self.valid]
        return out


def _so3_coefficients(theta: float):
    """sin(t)/t, (1-cos t)/t^2 and (t-sin t)/t^3 with small-angle series."""
    if theta < SERIES_THRESHOLD:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2**3 / 5040.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2**3 / 40320.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
        return a, b, c
    return (
        np.sin(theta) / theta,
        (1.0 - np.cos(theta)) / theta**2,
        (theta - np.sin(theta)) / theta**3,
    )


def se3_exp(xi: np.ndarray) -> SE3Pose:
    """Exponential map of a twist (rotation first, then translation)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    w, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    a, b, c = _so3_coefficients(theta)
    W = hat(w)
    W2 = W @ W
    rotation = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return SE3Pose(rotation, V @ v)


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    s = np.linalg.norm(vee(rotation - rotation.T)) / 2.0
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def se3_log(pose: SE3Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    r = pose.rotation
    theta = rotation_angle(r)
    if theta > np.pi - 1e-6:
        raise IllConditionedLogError(
            f"Rotation angle {theta:.9f} rad is too close to pi for a unique log"
        )
    skew = vee(r - r.T)
    if theta < SERIES_THRESHOLD:
        t2 = theta * theta
        scale = 0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0
        k = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        scale = theta / (2.0 * np.sin(theta))
        a, b, _ = _so3_coefficients(theta)
        k = (1.0 - a / (2.0 * b)) / (theta * theta)
    w = scale * skew
    W = hat(w)
    v_inv = np.eye(3) - 0.5 * W + k * (W @ W)
    return np.concatenate([w, v_inv @ pose.translation])


def relative_pose(pose_i: SE3Pose, pose_j: SE3Pose) -> SE3Pose:
    """Transform from camera i to camera j: ``P_j ∘ P_i^-1``."""
    return pose_j.compose(pose_i.inverse())


def perturb_pose(pose: SE3Pose, xi: np.ndarray) -> SE3Pose:
    """Left-multiplicative update ``exp(xi) ∘ pose``."""
    return se3_exp(xi).compose(pose)


# Differentiable counterparts on 4x4 pose tensors

_GENERATORS = np.zeros((6, 4, 4))
for _axis in range(3):
    _GENERATORS[_axis, :3, :3] = hat(np.eye(3)[_axis])
    _GENERATORS[3 + _axis, _axis, 3] = 1.0
_EXP_TERMS = 14


def twist_matrix(xi: Tensor) -> Tensor:
    """(..., 6) twists to their (..., 4, 4) Lie-algebra matrices."""
    lead = xi.shape[:-1]
    flat = reshape(xi, (-1, 6)) @ _GENERATORS.reshape(6, 16)
    return reshape(flat, lead + (4, 4))


def se3_exp_tensor(xi: Tensor) -> Tensor:
    """Differentiable exponential map by scaled Taylor series and squaring.

    A zero twist maps to the identity exactly.
    """
    xi = xi if isinstance(xi, Tensor) else Tensor(xi)
    X = twist_matrix(xi)
    bound = float(np.abs(X.data).sum(axis=-1).max(initial=0.0))
    squarings = 0 if bound <= 0.5 else int(np.ceil(np.log2(bound / 0.5)))
    Xs = X * (0.5**squarings) if squarings else X
    eye = np.broadcast_to(np.eye(4), X.shape)
    result = Tensor(eye)
    term = Tensor(eye)
    for k in range(1, _EXP_TERMS + 1):
        term = matmul(term, Xs) * (1.0 / k)
        result = result + term
    for _ in range(squarings):
        result = matmul(result, result)
    return result


def as_pose_tensor(pose: Union[SE3Pose, Tensor, np.ndarray]) -> Tensor:
    if isinstance(pose, Tensor):
        return pose
    if isinstance(pose, SE3Pose):
        return Tensor(pose.matrix())
    return Tensor(np.asarray(pose))


def invert_pose_tensor(pose: Tensor) -> Tensor:
    """Closed-form inverse of (..., 4, 4) rigid transforms."""
    rt = swapaxes(pose[..., :3, :3], -1, -2)
    t = pose[..., :3, 3:4]
    top = concat([rt, -matmul(rt, t)], axis=-1)
    bottom = np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0]), pose.shape[:-2] + (1, 4))
    return concat([top, Tensor(bottom)], axis=-2)


def relative_pose_tensor(pose_i: Tensor, pose_j: Tensor) -> Tensor:
    return matmul(pose_j, invert_pose_tensor(pose_i))


def back_project(
    intrinsics: Intrinsics, pixels: np.ndarray, inv_depth: Union[Tensor, np.ndarray]
) -> Tensor:
    """Lift (N,2) pixels with inverse depths (N,) to camera-frame points (N,3)."""
    rays = intrinsics.ray_directions(pixels)
    depth = 1.0 / (inv_depth if isinstance(inv_depth, Tensor) else Tensor(inv_depth))
    return reshape(depth, (-1, 1)) * rays


def project(
    intrinsics: Intrinsics,
    pose: Union[SE3Pose, Tensor, np.ndarray],
    points: Union[Tensor, np.ndarray],
):
    """Transform (N,3) points by ``pose`` and project them to pixels.

    Returns (pixels (N,2), valid (N,)); points with depth at most 1e-6 are
    flagged invalid and get finite placeholder coordinates.
    """
    pose = as_pose_tensor(pose)
    points = points if isinstance(points, Tensor) else Tensor(points)
    cam = points @ swapaxes(pose[:3, :3], 0, 1) + pose[:3, 3]
    z = cam[:, 2]
    valid = z.data > MIN_DEPTH
    keep = valid.astype(z.dtype)
    z_safe = z * keep + (1.0 - keep)
    u = cam[:, 0] / z_safe * intrinsics.fx + intrinsics.cx
    v = cam[:, 1] / z_safe * intrinsics.fy + intrinsics.cy
    return stack([u, v], axis=1), valid


def level_coordinates(pixels, stride: int):
    """Full-resolution pixel coordinates to a level subsampled by ``stride``."""
    return (pixels + 0.5) * (1.0 / stride) - 0.5


def full_coordinates(level_pixels: np.ndarray, stride: int) -> np.ndarray:
    return (np.asarray(level_pixels, dtype=np.float64) + 0.5) * stride - 0.5


@dataclass(eq=False)
class WarpResult:
    features: Tensor
    coords: Tensor
    valid: np.ndarray
    empty: bool


def warp_patch(
    pixels: np.ndarray,
    inv_depth: Tensor,
    intrinsics_i: Intrinsics,
    intrinsics_j: Intrinsics,
    pose_ij: Union[SE3Pose, Tensor],
    feature_map_j: Tensor,
    stride: int = 1,
) -> WarpResult:
    """Carry view-i pixels with inverse depth into view j and sample features.

    ``pixels`` are full-resolution view-i coordinates; ``feature_map_j`` is an
    (h,w,C) map subsampled by ``stride``. Out-of-bounds and behind-camera
    samples are zero and flagged invalid.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    inside = (
        (pixels[:, 0] >= -0.5)
        & (pixels[:, 0] <= intrinsics_i.width - 0.5)
        & (pixels[:, 1] >= -0.5)
        & (pixels[:, 1] <= intrinsics_i.height - 0.5)
    )
    if not inside.all():
        raise DomainError("warp_patch: patch coordinates leave view i")
    d = inv_depth.data
    if not (np.isfinite(d).all() and (d > 0).all()):
        raise DomainError("warp_patch: inverse depth must be finite and positive")
    points = back_project(intrinsics_i, pixels, inv_depth)
    coords, in_front = project(intrinsics_j, pose_ij, points)
    sampled, in_bounds = bilinear_sample(feature_map_j, level_coordinates(coords, stride))
    valid = in_front & in_bounds
    features = sampled * valid.astype(sampled.dtype)[:, None]
    empty = not valid.any()
    if empty:
        logger.debug("Patch warp left the neighbor view entirely")
    return WarpResult(features=features, coords=coords, valid=valid, empty=empty)


def save_poses(path: Union[str, Path], poses: Sequence[SE3Pose]) -> None:
    """One world-to-camera pose per line, 12 numbers of the row-major 3x4."""
    rows = np.stack([p.matrix()[:3].reshape(12) for p in poses])
    np.savetxt(path, rows, fmt="%.17g")
    logger.info(f"Saved {len(poses)} poses to {path}")


def load_poses(path: Union[str, Path]) -> List[SE3Pose]:
    rows = np.loadtxt(path, ndmin=2)
    if rows.shape[1] != 12:
        raise ValueError(f"Pose file {path} must have 12 numbers per line")
    return [SE3Pose.from_matrix(r.reshape(3, 4)) for r in rows]


def look_at(
    position: np.ndarray, target: np.ndarray, down: Optional[np.ndarray] = None
) -> SE3Pose:
    """World-to-camera pose at ``position`` looking at ``target`` (y down)."""
    down = np.array([0.0, 1.0, 0.0]) if down is None else np.asarray(down, float)
    forward = np.asarray(target, float) - np.asarray(position, float)
    forward /= np.linalg.norm(forward)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    below = np.cross(forward, right)
    c2w = np.stack([right, below, forward], axis=1)
    rotation = c2w.T
    return SE3Pose(rotation, -rotation @ np.asarray(position, float))
