"""Generalizable image-based NeRF: feature pyramid, view pooling, volume rendering."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    bilinear_sample,
    concat,
    conv2d,
    exp,
    getitem,
    linear,
    relu,
    reshape,
    sigmoid,
    softplus,
    stack,
    transpose,
    upsample2x,
)
from .errors import DomainError, ShapeError
from .geometry import Intrinsics, level_coordinates, project

logger = logging.getLogger(__name__)

PYRAMID_LEVELS = 3


@dataclass(eq=False)
class FeaturePyramid:
    """Per-image feature maps, each (h, w, C), finest first."""

    levels: List[Tensor]
    strides: Tuple[int, ...]
    image_id: int = 0

    def level(self, index: int) -> Tensor:
        return self.levels[index]


@dataclass(eq=False)
class SourceView:
    image: np.ndarray
    intrinsics: Intrinsics
    pyramid: FeaturePyramid


@dataclass(eq=False)
class RenderSample:
    depths: np.ndarray  # (N, K)
    deltas: np.ndarray  # (N, K)
    sigma: Tensor  # (N, K)
    color: Tensor  # (N, K, 3)
    transmittance: Tensor  # (N, K)
    weights: Tensor  # (N, K)
    rgb: Tensor  # (N, 3)
    depth: Tensor  # (N,)


@dataclass(eq=False)
class RenderOutput:
    rgb: Tensor
    depth: Tensor
    ray_valid: np.ndarray
    sample: RenderSample


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_pyramid_params(
    rng: np.random.Generator, channels: Sequence[int] = (16, 32, 64), in_channels: int = 3
) -> Dict[str, Tensor]:
    c1, c2, c3 = channels
    p = {}
    for name, (cout, cin) in {
        "conv1": (c1, in_channels),
        "conv2": (c2, c1),
        "conv3": (c3, c2),
    }.items():
        p[f"feature.{name}.w"] = _he(rng, (cout, cin, 3, 3), cin * 9)
        p[f"feature.{name}.b"] = _zeros(cout)
    for name, c in {"lat1": c1, "lat2": c2, "lat3": c3}.items():
        p[f"feature.{name}.w"] = _he(rng, (c, c, 1, 1), c)
        p[f"feature.{name}.b"] = _zeros(c)
    p["feature.up3.w"] = _he(rng, (c2, c3, 3, 3), c3 * 9)
    p["feature.up3.b"] = _zeros(c2)
    p["feature.up2.w"] = _he(rng, (c1, c2, 3, 3), c2 * 9)
    p["feature.up2.b"] = _zeros(c1)
    return p


def _bias(b: Tensor) -> Tensor:
    return reshape(b, (1, -1, 1, 1))


def extract_pyramid(
    image: Union[np.ndarray, Tensor], params: Dict[str, Tensor], image_id: int = 0
) -> FeaturePyramid:
    """Three-level feature pyramid at strides 2, 4 and 8.

    Images whose sides are not multiples of 8 are zero-padded at the bottom
    and right, with a warning.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 3 or x.shape[2] != params["feature.conv1.w"].shape[1]:
        raise ShapeError("extract_pyramid", x.shape, params["feature.conv1.w"].shape)
    h, w, _ = x.shape
    unit = 2**PYRAMID_LEVELS
    pad_h, pad_w = (-h) % unit, (-w) % unit
    if pad_h or pad_w:
        logger.warning(f"Padding {h}x{w} image by ({pad_h}, {pad_w}) to a multiple of {unit}")
        x = Tensor(np.pad(x.data, ((0, pad_h), (0, pad_w), (0, 0))))
    x = reshape(transpose(x, (2, 0, 1)), (1, x.shape[2], h + pad_h, w + pad_w))

    def conv(inp, name, stride=1, padding=1):
        out = conv2d(inp, params[f"feature.{name}.w"], stride=stride, padding=padding)
        return out + _bias(params[f"feature.{name}.b"])

    c1 = relu(conv(x, "conv1", stride=2))
    c2 = relu(conv(c1, "conv2", stride=2))
    c3 = relu(conv(c2, "conv3", stride=2))
    p3 = conv(c3, "lat3", padding=0)
    p2 = conv(c2, "lat2", padding=0) + conv(upsample2x(p3), "up3")
    p1 = conv(c1, "lat1", padding=0) + conv(upsample2x(p2), "up2")
    levels = [transpose(reshape(p, p.shape[1:]), (1, 2, 0)) for p in (p1, p2, p3)]
    return FeaturePyramid(levels=levels, strides=(2, 4, 8), image_id=image_id)


def sample_depths(near: float, far: float, n: int) -> np.ndarray:
    """``n`` depths uniform in inverse depth, ``near`` first."""
    if near <= 0 or far <= near:
        raise DomainError(f"Depth range ({near}, {far}) must satisfy 0 < near < far")
    if n < 2:
        raise DomainError(f"At least two depth samples are needed, got {n}")
    z = 1.0 / np.linspace(1.0 / near, 1.0 / far, n)
    z[0], z[-1] = near, far
    return z


def pool_views(features: Tensor, mask: np.ndarray) -> Tuple[Tensor, Tensor, np.ndarray]:
    """Masked mean and variance over the view axis of (M, N, C) features.

    Values are sorted along the view axis before every sum, so the result is
    bitwise identical under any permutation of the views.
    """
    m_views, n, c = features.shape
    if mask.shape != (m_views, n):
        raise ShapeError("pool_views", features.shape, mask.shape)
    weights = mask.astype(features.dtype)[..., None]
    count = weights.sum(axis=0)
    denom = np.maximum(count, 1.0)
    ray_idx = np.arange(n)[None, :, None]
    chan_idx = np.arange(c)[None, None, :]

    def sorted_sum(values: Tensor) -> Tensor:
        order = np.argsort(values.data, axis=0, kind="stable")
        return getitem(values, (order, ray_idx, chan_idx)).sum(axis=0)

    masked = features * weights
    avg = sorted_sum(masked) / denom
    dev = (features - avg) * weights
    var = sorted_sum(dev * dev) / denom
    all_masked = count[:, 0] == 0
    return avg, var, all_masked


def init_renderer_params(
    rng: np.random.Generator, feature_dim: int, aggregate_dim: int = 32, hidden: int = 64
) -> Dict[str, Tensor]:
    return {
        "renderer.agg.w": _he(rng, (2 * feature_dim, aggregate_dim), 2 * feature_dim),
        "renderer.agg.b": _zeros(aggregate_dim),
        "renderer.trunk.w": _he(rng, (aggregate_dim, hidden), aggregate_dim),
        "renderer.trunk.b": _zeros(hidden),
        "renderer.sigma.w": _he(rng, (hidden, 1), hidden),
        "renderer.sigma.b": _zeros(1),
        "renderer.color1.w": _he(rng, (hidden + 3, hidden), hidden + 3),
        "renderer.color1.b": _zeros(hidden),
        "renderer.color2.w": _he(rng, (hidden, 3), hidden),
        "renderer.color2.b": _zeros(3),
    }


def aggregate(
    features: Tensor, mask: np.ndarray, params: Dict[str, Tensor]
) -> Tuple[Tensor, np.ndarray]:
    """Permutation-invariant per-point feature from (M, N, C) view features."""
    avg, var, all_masked = pool_views(features, mask)
    pooled = concat([avg, var], axis=1)
    g = relu(linear(pooled, params["renderer.agg.w"], params["renderer.agg.b"]))
    keep = (~all_masked).astype(g.dtype)[:, None]
    return g * keep, all_masked


def predict_density_color(
    g: Tensor, directions: np.ndarray, params: Dict[str, Tensor]
) -> Tuple[Tensor, Tensor]:
    """Density (N,) through softplus and colour (N,3) through a sigmoid."""
    h = relu(linear(g, params["renderer.trunk.w"], params["renderer.trunk.b"]))
    sigma = softplus(linear(h, params["renderer.sigma.w"], params["renderer.sigma.b"]))
    hc = relu(
        linear(
            concat([h, Tensor(directions)], axis=1),
            params["renderer.color1.w"],
            params["renderer.color1.b"],
        )
    )
    color = sigmoid(linear(hc, params["renderer.color2.w"], params["renderer.color2.b"]))
    return reshape(sigma, (-1,)), color


def _exclusive_cumsum_matrix(k: int) -> np.ndarray:
    return np.triu(np.ones((k, k)), 1)


def volume_render(
    sigma: Tensor,
    color: Tensor,
    depths: np.ndarray,
    last_delta: Optional[float] = None,
) -> RenderSample:
    """Alpha-composite (N, K) densities and (N, K, 3) colours along rays.

    The final interval repeats the previous one unless ``last_delta`` is
    given; a single sample requires ``last_delta``.
    """
    squeeze = sigma.ndim == 1
    if squeeze:
        sigma = reshape(sigma, (1, -1))
        color = reshape(color, (1,) + color.shape)
    n, k = sigma.shape
    if color.shape != (n, k, 3):
        raise ShapeError("volume_render", sigma.shape, color.shape)
    depths = np.broadcast_to(np.asarray(depths, dtype=np.float64), (n, k))
    if (sigma.data < 0).any():
        raise DomainError("volume_render: densities must be non-negative")
    if k > 1 and not (np.diff(depths, axis=1) > 0).all():
        raise DomainError("volume_render: sample depths must increase along each ray")
    if k == 1 and last_delta is None:
        raise DomainError("volume_render: a single sample needs an explicit last_delta")
    gaps = np.diff(depths, axis=1)
    tail = gaps[:, -1:] if last_delta is None else np.full((n, 1), float(last_delta))
    deltas = np.concatenate([gaps, tail], axis=1)

    tau = sigma * deltas
    transmittance = exp(-(tau @ _exclusive_cumsum_matrix(k)))
    alpha = 1.0 - exp(-tau)
    weights = transmittance * alpha
    rgb = (reshape(weights, (n, k, 1)) * color).sum(axis=1)
    depth = (weights * depths).sum(axis=1)
    if squeeze:
        rgb, depth = reshape(rgb, (3,)), reshape(depth, ())
    return RenderSample(
        depths=depths,
        deltas=deltas,
        sigma=sigma,
        color=color,
        transmittance=transmittance,
        weights=weights,
        rgb=rgb,
        depth=depth,
    )


def render_rays(
    pixels: np.ndarray,
    intrinsics: Intrinsics,
    sources: Sequence[SourceView],
    poses: Union[Tensor, Sequence[Tensor]],
    params: Dict[str, Tensor],
    near: float,
    far: float,
    n_samples: int,
) -> RenderOutput:
    """Render target-view pixels from neighbor views.

    ``poses[j]`` maps target-camera coordinates into source view ``j``.
    Rays whose samples fall outside every source are flagged in ``ray_valid``.
    """
    if not sources:
        raise ValueError("render_rays needs at least one source view")
    z = sample_depths(near, far, n_samples)
    rays = intrinsics.ray_directions(pixels)
    n = len(rays)
    points = (rays[:, None, :] * z[None, :, None]).reshape(-1, 3)
    view_dirs = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    view_dirs = np.repeat(view_dirs, n_samples, axis=0)

    feats, masks = [], []
    for j, source in enumerate(sources):
        coords, in_front = project(source.intrinsics, poses[j], points)
        level0 = source.pyramid.levels[0]
        f, f_ok = bilinear_sample(level0, level_coordinates(coords, source.pyramid.strides[0]))
        rgb, c_ok = bilinear_sample(Tensor(source.image), coords)
        valid = in_front & f_ok & c_ok
        feats.append(concat([rgb, f], axis=1) * valid.astype(f.dtype)[:, None])
        masks.append(valid)

    g, all_masked = aggregate(stack(feats), np.stack(masks), params)
    sigma, color = predict_density_color(g, view_dirs, params)
    sample = volume_render(
        reshape(sigma, (n, n_samples)), reshape(color, (n, n_samples, 3)), z
    )
    ray_valid = ~all_masked.reshape(n, n_samples).all(axis=1)
    if not ray_valid.all():
        logger.debug(f"{int((~ray_valid).sum())} rays unseen by every source view")
    return RenderOutput(sample.rgb, sample.depth, ray_valid, sample)


def render_image(
    intrinsics: Intrinsics,
    sources: Sequence[SourceView],
    poses: Union[Tensor, Sequence[Tensor]],
    params: Dict[str, Tensor],
    near: float,
    far: float,
    n_samples: int,
    chunk: int = 1024,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full (H,W,3) image, (H,W) depth and ray validity, rendered in chunks."""
    h, w = intrinsics.height, intrinsics.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    rgb = np.zeros((len(pixels), 3))
    depth = np.zeros(len(pixels))
    valid = np.zeros(len(pixels), dtype=bool)
    for start in range(0, len(pixels), chunk):
        part = slice(start, start + chunk)
        out = render_rays(pixels[part], intrinsics, sources, poses, params, near, far, n_samples)
        rgb[part] = out.rgb.data
        depth[part] = out.depth.data
        valid[part] = out.ray_valid
    return rgb.reshape(h, w, 3), depth.reshape(h, w), valid.reshape(h, w)
