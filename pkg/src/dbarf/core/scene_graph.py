"""Keypoint matching and co-visibility scene graph for neighbor selection."""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Collection, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter
from scipy.stats import kendalltau

from .geometry import Intrinsics

logger = logging.getLogger(__name__)

LOW_TEXTURE_KEYPOINTS = 8
MIN_RANSAC_MATCHES = 8


@dataclass(eq=False)
class Keypoint:
    position: np.ndarray  # (x, y) pixel
    response: float
    descriptor: np.ndarray


@dataclass(eq=False)
class MatchResult:
    """Mutual nearest-neighbour pairs and their epipolar inlier mask.

    When fewer than eight pairs survive the ratio test the pairs are returned
    unfiltered and ``filtered`` is False.
    """

    pairs: np.ndarray  # (n, 2) keypoint indices into (a, b)
    inliers: np.ndarray  # (n,) bool
    filtered: bool
    fundamental: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return int(self.inliers.sum())

    @property
    def inlier_pairs(self) -> np.ndarray:
        return self.pairs[self.inliers]


@dataclass
class SceneGraph:
    n_images: int
    edges: Dict[Tuple[int, int], int] = field(default_factory=dict)

    def add_edge(self, i: int, j: int, count: int) -> None:
        if i == j:
            raise ValueError("Scene graph has no self-loops")
        self.edges[(min(i, j), max(i, j))] = int(count)

    def weight(self, i: int, j: int) -> int:
        return self.edges.get((min(i, j), max(i, j)), 0)

    def neighbors(self, i: int) -> List[Tuple[int, int]]:
        """(view, inlier count) pairs by descending count, ties by index."""
        out = []
        for (a, b), count in self.edges.items():
            if a == i:
                out.append((b, count))
            elif b == i:
                out.append((a, count))
        return sorted(out, key=lambda item: (-item[1], item[0]))

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))


def to_grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


def detect_and_describe(
    image: np.ndarray,
    max_keypoints: int = 512,
    nms_radius: int = 4,
    patch_radius: int = 4,
    harris_k: float = 0.04,
    sigma: float = 1.0,
    relative_threshold: float = 0.01,
) -> List[Keypoint]:
    """Harris corners with radius NMS and normalized-patch descriptors."""
    gray = to_grayscale(image)
    gy, gx = np.gradient(gray)
    sxx = gaussian_filter(gx * gx, sigma)
    syy = gaussian_filter(gy * gy, sigma)
    sxy = gaussian_filter(gx * gy, sigma)
    response = sxx * syy - sxy * sxy - harris_k * (sxx + syy) ** 2
    peak = response.max(initial=0.0)
    if peak <= 1e-12:
        logger.warning("Low texture: no corner response in image")
        return []

    yy, xx = np.mgrid[-nms_radius : nms_radius + 1, -nms_radius : nms_radius + 1]
    footprint = xx * xx + yy * yy <= nms_radius * nms_radius
    local_max = response == maximum_filter(
        response, footprint=footprint, mode="constant", cval=-np.inf
    )
    candidates = local_max & (response > relative_threshold * peak)
    r = patch_radius
    candidates[:r, :] = candidates[-r:, :] = False
    candidates[:, :r] = candidates[:, -r:] = False
    ys, xs = np.nonzero(candidates)
    order = np.lexsort((xs, ys, -response[ys, xs]))

    keypoints = []
    for k in order:
        if len(keypoints) >= max_keypoints:
            break
        y, x = ys[k], xs[k]
        patch = gray[y - r : y + r + 1, x - r : x + r + 1].ravel()
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        if norm < 1e-8:
            continue
        keypoints.append(
            Keypoint(
                position=np.array([float(x), float(y)]),
                response=float(response[y, x]),
                descriptor=patch / norm,
            )
        )
    if len(keypoints) < LOW_TEXTURE_KEYPOINTS:
        logger.warning(f"Low texture: only {len(keypoints)} keypoints detected")
    return keypoints


def _normalizer(points: np.ndarray, intrinsics: Optional[Intrinsics]) -> np.ndarray:
    if intrinsics is not None:
        return np.linalg.inv(intrinsics.matrix())
    mean = points.mean(axis=0)
    spread = np.sqrt(((points - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(spread, 1e-12)
    return np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])


def _homogeneous(points: np.ndarray) -> np.ndarray:
    return np.concatenate([points, np.ones((len(points), 1))], axis=1)


def fundamental_batch(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Rank-2 eight-point solutions for (B, n, 2) normalized correspondences."""
    x, y = xa[..., 0], xa[..., 1]
    u, v = xb[..., 0], xb[..., 1]
    one = np.ones_like(x)
    A = np.stack([u * x, u * y, u, v * x, v * y, v, x, y, one], axis=-1)
    _, _, vt = np.linalg.svd(A)
    F = vt[..., -1, :].reshape(-1, 3, 3)
    U, S, Vt = np.linalg.svd(F)
    S[..., 2] = 0.0
    return U @ (S[..., None] * Vt)


def sampson_distance(F: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """First-order geometric error of (n,2) pixel pairs under ``F`` (pixels)."""
    ha, hb = _homogeneous(xa), _homogeneous(xb)
    fx = ha @ F.T
    ftx = hb @ F
    err = np.sum(hb * fx, axis=1)
    denom = fx[:, 0] ** 2 + fx[:, 1] ** 2 + ftx[:, 0] ** 2 + ftx[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.where(denom > 0, err * err / denom, np.inf))


def ransac_fundamental(
    xa: np.ndarray,
    xb: np.ndarray,
    intrinsics: Optional[Intrinsics] = None,
    threshold: float = 2.0,
    iterations: int = 1000,
    seed: int = 0,
) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """Robust fundamental matrix; returns (F in pixel coordinates, inlier mask)."""
    n = len(xa)
    if n < MIN_RANSAC_MATCHES:
        return None, np.ones(n, dtype=bool)
    Ta, Tb = _normalizer(xa, intrinsics), _normalizer(xb, intrinsics)
    na = (_homogeneous(xa) @ Ta.T)[:, :2]
    nb = (_homogeneous(xb) @ Tb.T)[:, :2]

    rng = np.random.default_rng(seed)
    samples = np.stack(
        [rng.choice(n, MIN_RANSAC_MATCHES, replace=False) for _ in range(iterations)]
    )
    candidates = Tb.T @ fundamental_batch(na[samples], nb[samples]) @ Ta
    counts = np.array(
        [(sampson_distance(F, xa, xb) < threshold).sum() for F in candidates]
    )
    best = candidates[int(np.argmax(counts))]
    inliers = sampson_distance(best, xa, xb) < threshold
    if inliers.sum() >= MIN_RANSAC_MATCHES:
        refit = Tb.T @ fundamental_batch(na[inliers][None], nb[inliers][None])[0] @ Ta
        refit_inliers = sampson_distance(refit, xa, xb) < threshold
        if refit_inliers.sum() >= inliers.sum():
            best, inliers = refit, refit_inliers
    return best / np.linalg.norm(best), inliers


def match_and_filter(
    a: Sequence[Keypoint],
    b: Sequence[Keypoint],
    intrinsics: Optional[Intrinsics] = None,
    ratio: float = 0.8,
    threshold: float = 2.0,
    iterations: int = 1000,
    seed: int = 0,
) -> MatchResult:
    """Mutual nearest neighbours with a ratio test, then RANSAC epipolar filtering."""
    if not a or not b:
        return MatchResult(np.zeros((0, 2), int), np.zeros(0, bool), filtered=False)
    da = np.stack([k.descriptor for k in a])
    db = np.stack([k.descriptor for k in b])
    dist = np.sqrt(np.maximum(2.0 - 2.0 * da @ db.T, 0.0))
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    best = dist[np.arange(len(a)), nn_ab]
    if len(b) > 1:
        second = np.partition(dist, 1, axis=1)[:, 1]
        passes = best < ratio * second
    else:
        passes = np.ones(len(a), dtype=bool)
    mutual = nn_ba[nn_ab] == np.arange(len(a))
    keep = np.flatnonzero(passes & mutual)
    pairs = np.stack([keep, nn_ab[keep]], axis=1) if len(keep) else np.zeros((0, 2), int)

    if len(pairs) < MIN_RANSAC_MATCHES:
        logger.debug(f"Only {len(pairs)} raw matches; skipping epipolar filter")
        return MatchResult(pairs, np.ones(len(pairs), dtype=bool), filtered=False)
    xa = np.stack([a[i].position for i in pairs[:, 0]])
    xb = np.stack([b[j].position for j in pairs[:, 1]])
    F, inliers = ransac_fundamental(xa, xb, intrinsics, threshold, iterations, seed)
    return MatchResult(pairs, inliers, filtered=True, fundamental=F)


def _match_pair(pair, keypoints, intrinsics, ratio, threshold, iterations, seed):
    i, j = pair
    result = match_and_filter(
        keypoints[i], keypoints[j], intrinsics, ratio, threshold, iterations, seed
    )
    return i, j, result.count


def build_scene_graph(
    images: Sequence[np.ndarray],
    intrinsics: Optional[Intrinsics] = None,
    min_matches: int = 30,
    max_keypoints: int = 512,
    nms_radius: int = 4,
    ratio: float = 0.8,
    threshold: float = 2.0,
    iterations: int = 1000,
    seed: int = 0,
    max_workers: Optional[int] = None,
) -> SceneGraph:
    """Edges between views whose inlier match count reaches ``min_matches``."""
    keypoints = [
        detect_and_describe(im, max_keypoints=max_keypoints, nms_radius=nms_radius)
        for im in images
    ]
    pairs = [(i, j) for i in range(len(images)) for j in range(i + 1, len(images))]
    worker = partial(
        _match_pair,
        keypoints=keypoints,
        intrinsics=intrinsics,
        ratio=ratio,
        threshold=threshold,
        iterations=iterations,
        seed=seed,
    )
    logger.info(
        f"Matching {len(pairs)} view pairs on {max_workers or 'auto'} workers"
    )
    results = []
    if max_workers == 1:
        results = [worker(p) for p in pairs]
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as executor:
            futures = [executor.submit(worker, p) for p in pairs]
            for future in as_completed(futures):
                results.append(future.result())
    results.sort()

    graph = SceneGraph(n_images=len(images))
    for i, j, count in results:
        if count >= min_matches:
            graph.add_edge(i, j, count)
    logger.info(f"Scene graph has {len(graph.edges)} edges over {len(images)} views")
    return graph


def select_neighbors(
    graph: SceneGraph, i: int, k: int, allowed: Optional[Collection[int]] = None
) -> List[int]:
    """Up to ``k`` neighbors of view ``i`` ranked by inlier count.

    With ``allowed`` only those views are eligible; an empty result warns that
    the view is isolated.
    """
    ranked = [j for j, _ in graph.neighbors(i) if allowed is None or j in allowed]
    if not ranked:
        where = "" if allowed is None else " among the allowed views"
        logger.warning(f"View {i} is isolated in the scene graph{where}")
    return ranked[:k]


def ranking_agreement(graph: SceneGraph, covisible: np.ndarray) -> float:
    """Mean Kendall tau between inlier-count and covisibility neighbor rankings.

    ``covisible`` is an (n,n) matrix of overlap scores; views with fewer than two
    graph neighbors are skipped.
    """
    taus = []
    for i in range(graph.n_images):
        ranked = graph.neighbors(i)
        if len(ranked) < 2:
            continue
        counts = [c for _, c in ranked]
        overlap = [covisible[i, j] for j, _ in ranked]
        tau, _ = kendalltau(counts, overlap)
        if np.isfinite(tau):
            taus.append(tau)
    return float(np.mean(taus)) if taus else float("nan")


def graph_from_matches(
    matches: Dict[Tuple[int, int], np.ndarray],
    n_images: int,
    intrinsics: Optional[Intrinsics] = None,
    min_matches: int = 30,
    threshold: float = 2.0,
    iterations: int = 1000,
    seed: int = 0,
) -> SceneGraph:
    """Scene graph from imported raw correspondences (n,4 rows: u_i v_i u_j v_j)."""
    graph = SceneGraph(n_images=n_images)
    for (i, j), rows in sorted(matches.items()):
        _, inliers = ransac_fundamental(
            rows[:, :2], rows[:, 2:], intrinsics, threshold, iterations, seed
        )
        count = int(inliers.sum())
        if count >= min_matches:
            graph.add_edge(i, j, count)
    return graph


def load_match_file(path: Union[str, Path]) -> Dict[Tuple[int, int], np.ndarray]:
    """Blocks headed ``pair i j`` followed by ``u_i v_i u_j v_j`` rows."""
    matches: Dict[Tuple[int, int], list] = {}
    current = None
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "pair":
                current = (int(parts[1]), int(parts[2]))
                matches.setdefault(current, [])
            elif current is None or len(parts) != 4:
                raise ValueError(f"Malformed match file {path} at line {number}")
            else:
                matches[current].append([float(p) for p in parts])
    return {k: np.array(v, dtype=np.float64).reshape(-1, 4) for k, v in matches.items()}


def save_match_file(
    path: Union[str, Path], matches: Dict[Tuple[int, int], np.ndarray]
) -> None:
    with open(path, "w") as f:
        for (i, j), rows in sorted(matches.items()):
            f.write(f"pair {i} {j}\n")
            for row in rows:
                f.write(" ".join(f"{v:.6f}" for v in row) + "\n")


def save_scene_graph(path: Union[str, Path], graph: SceneGraph) -> None:
    with open(path, "w") as f:
        f.write(f"# {graph.n_images} views\n")
        for (i, j), count in sorted(graph.edges.items()):
            f.write(f"{i} {j} {count}\n")
    logger.info(f"Saved scene graph to {path}")


def load_scene_graph(path: Union[str, Path]) -> SceneGraph:
    n_images = 0
    edges = []
    with open(path) as f:
        for line in f:
            if line.startswith("#"):
                n_images = int(line[1:].split()[0])
                continue
            if line.strip():
                i, j, count = (int(v) for v in line.split())
                edges.append((i, j, count))
                n_images = max(n_images, i + 1, j + 1)
    graph = SceneGraph(n_images=n_images)
    for i, j, count in edges:
        graph.add_edge(i, j, count)
    return graph
