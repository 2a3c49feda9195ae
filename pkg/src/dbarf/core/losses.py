"""Training losses, image metrics and pose-error evaluation."""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    abs_,
    bilinear_sample,
    conv2d,
    exp,
    reshape,
    sqrt,
    transpose,
)
from .errors import DegenerateAlignmentError, UndefinedLossError
from .geometry import (
    DepthMap,
    Intrinsics,
    SE3Pose,
    back_project,
    project,
    rotation_angle,
)
from .models import LossReport, PoseErrorReport

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
RGB_EPS = 1e-20


def loss_rgb(rendered: Tensor, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean Euclidean colour error over the unmasked rays."""
    mask = np.ones(len(target), dtype=bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise UndefinedLossError("loss_rgb: every ray is masked")
    diff = rendered[mask] - np.asarray(target)[mask]
    return sqrt((diff * diff).sum(axis=1) + RGB_EPS).mean()


def loss_depth_smooth(
    inv_depth: Union[Tensor, DepthMap], image: np.ndarray, valid: Optional[np.ndarray] = None
) -> Tensor:
    """Edge-aware smoothness of an (H,W) inverse-depth map.

    Only forward-difference pairs whose two pixels are valid count. A
    ``DepthMap`` brings its own mask; with no valid pair the loss is zero.
    """
    if isinstance(inv_depth, DepthMap):
        valid = inv_depth.valid if valid is None else valid & inv_depth.valid
        inv_depth = Tensor(inv_depth.inv_depth)
    image = np.asarray(image, dtype=np.float64)
    if inv_depth.shape != image.shape[:2]:
        raise ValueError(
            f"Depth map {inv_depth.shape} does not match image {image.shape[:2]}"
        )
    valid = np.ones(inv_depth.shape, dtype=bool) if valid is None else np.asarray(valid, bool)
    if valid.shape != inv_depth.shape:
        raise ValueError(f"Validity mask {valid.shape} does not match depth {inv_depth.shape}")
    weight_x = np.exp(-np.abs(np.diff(image, axis=1)).mean(axis=2))
    weight_y = np.exp(-np.abs(np.diff(image, axis=0)).mean(axis=2))
    pairs_x = valid[:, 1:] & valid[:, :-1]
    pairs_y = valid[1:, :] & valid[:-1, :]

    total = None
    for pairs, weight, (dy, dx) in ((pairs_x, weight_x, (0, 1)), (pairs_y, weight_y, (1, 0))):
        ys, xs = np.nonzero(pairs)
        if len(ys) == 0:
            continue
        grad = abs_(inv_depth[ys + dy, xs + dx] - inv_depth[ys, xs])
        term = (grad * weight[ys, xs]).mean()
        total = term if total is None else total + term
    if total is None:
        logger.debug("No valid neighboring pixels for the smoothness loss")
        return (inv_depth * 0.0).sum()
    return total


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _blur(x: Tensor, window: np.ndarray) -> Tensor:
    """Separable Gaussian blur of (C,1,H,W) with zero padding."""
    k = len(window)
    x = conv2d(x, window.reshape(1, 1, k, 1), padding=(k // 2, 0))
    return conv2d(x, window.reshape(1, 1, 1, k), padding=(0, k // 2))


def ssim_map(a, b) -> Tensor:
    """Per-pixel, per-channel SSIM of two (H,W,C) images.

    Local statistics use an 11x11 Gaussian window renormalized at the borders.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    h, w, c = a.shape
    window = gaussian_window()
    mass = _blur(Tensor(np.ones((1, 1, h, w))), window).data

    def stats(x):
        return _blur(x, window) / mass

    xa = reshape(transpose(a, (2, 0, 1)), (c, 1, h, w))
    xb = reshape(transpose(b, (2, 0, 1)), (c, 1, h, w))
    mu_a, mu_b = stats(xa), stats(xb)
    var_a = stats(xa * xa) - mu_a * mu_a
    var_b = stats(xb * xb) - mu_b * mu_b
    cov = stats(xa * xb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return transpose(reshape(num / den, (c, h, w)), (1, 2, 0))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_map(np.asarray(a), np.asarray(b)).data.mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1], capped at 99."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def loss_photo_warp(
    target_image: np.ndarray,
    neighbor_images: Sequence[np.ndarray],
    poses: Tensor,
    inv_depth: Tensor,
    intrinsics_t: Intrinsics,
    intrinsics_n: Sequence[Intrinsics],
    alpha: float = 0.85,
) -> Tensor:
    """SSIM + L1 photometric error of neighbors warped into the target.

    Pixels that leave a neighbor are filled with the target colour before the
    SSIM window and excluded from the average. Neighbors with no valid pixel
    are skipped with a warning.
    """
    h, w, _ = target_image.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    points = back_project(intrinsics_t, pixels, reshape(inv_depth, (-1,)))
    flat_target = target_image.reshape(-1, 3)
    terms = []
    for j, image in enumerate(neighbor_images):
        coords, in_front = project(intrinsics_n[j], poses[j], points)
        warped, in_bounds = bilinear_sample(Tensor(image), coords)
        valid = in_front & in_bounds
        if not valid.any():
            logger.warning(f"Neighbor {j} shares no pixels with the target; excluded")
            continue
        keep = valid.astype(warped.dtype)[:, None]
        filled = warped * keep + flat_target * (1.0 - keep)
        filled = reshape(filled, (h, w, 3))
        structural = (1.0 - ssim_map(filled, target_image).mean(axis=2)) * 0.5
        l1 = abs_(filled - target_image).mean(axis=2)
        per_pixel = reshape(structural * alpha + l1 * (1.0 - alpha), (-1,))
        terms.append(per_pixel[valid].mean())
    if not terms:
        raise UndefinedLossError("loss_photo_warp: no neighbor overlaps the target")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / len(terms)


def schedule_weight(t: int, beta: float) -> float:
    return float(2.0 ** (beta * t))


def loss_final(
    l_rgb: Tensor, l_depth: Tensor, l_photo: Tensor, t: int, beta: float = -1e-4
) -> Tuple[Tensor, LossReport]:
    """Blend geometric and colour losses with weight ``2 ** (beta * t)``."""
    w = schedule_weight(t, beta)
    final = w * (l_depth + l_photo) + (1.0 - w) * l_rgb
    report = LossReport(
        l_rgb=l_rgb.item(),
        l_depth=l_depth.item(),
        l_photo=l_photo.item(),
        w=w,
        l_final=final.item(),
        t=t,
    )
    logger.debug(
        f"t={t} w={w:.6f} l_rgb={report.l_rgb:.6f} l_depth={report.l_depth:.6f} "
        f"l_photo={report.l_photo:.6f} l_final={report.l_final:.6f}"
    )
    return final, report


def umeyama_alignment(
    source: np.ndarray, target: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Similarity (R, t, s) minimizing ``|s R source + t - target|``."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = len(source)
    if n < 3:
        raise DegenerateAlignmentError(f"Alignment needs at least 3 cameras, got {n}")
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    xs, xt = source - mu_s, target - mu_t
    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateAlignmentError("Camera centers are collinear or coincident")
    cov = xt.T @ xs / n
    U, S, Vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        sign[2, 2] = -1.0
    rotation = U @ sign @ Vt
    var_s = (xs * xs).sum() / n
    scale = float(np.trace(np.diag(S) @ sign) / var_s)
    translation = mu_t - scale * rotation @ mu_s
    return rotation, translation, scale


def pose_error(predicted: Sequence[SE3Pose], truth: Sequence[SE3Pose]) -> PoseErrorReport:
    """Rotation (degrees) and translation errors after similarity alignment of centers."""
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predicted poses for {len(truth)} references")
    centers_p = np.stack([p.center for p in predicted])
    centers_t = np.stack([p.center for p in truth])
    rotation, translation, scale = umeyama_alignment(centers_p, centers_t)
    aligned = scale * centers_p @ rotation.T + translation
    rot_errors = []
    for p, g in zip(predicted, truth):
        aligned_c2w = rotation @ p.rotation.T
        rot_errors.append(np.rad2deg(rotation_angle(aligned_c2w.T @ g.rotation.T)))
    trans_errors = np.linalg.norm(aligned - centers_t, axis=1)
    mean_trans = float(trans_errors.mean())
    return PoseErrorReport(
        rot_errors_deg=[float(e) for e in rot_errors],
        trans_errors=[float(e) for e in trans_errors],
        mean_rot_err_deg=float(np.mean(rot_errors)),
        mean_trans_err=mean_trans,
        mean_trans_err_x100=mean_trans * 100.0,
        alignment_rotation=rotation.tolist(),
        alignment_translation=translation.tolist(),
        alignment_scale=scale,
    )


def batch_pose_error(
    relative: np.ndarray, target_truth: SE3Pose, neighbor_truth: Sequence[SE3Pose]
) -> PoseErrorReport:
    """Pose error of one batch whose target camera frame is the world frame.

    ``relative`` holds the (M,4,4) predicted target-to-neighbor transforms.
    """
    predicted: List[SE3Pose] = [SE3Pose.identity()]
    predicted += [SE3Pose.from_matrix(m) for m in np.asarray(relative)]
    return pose_error(predicted, [target_truth, *neighbor_truth])
