"""Reading and writing images, depth maps and demo image folders."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import imageio.v3 as iio
import numpy as np
import yaml

from .geometry import Intrinsics, SE3Pose, load_poses

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _to_float(image: np.ndarray) -> np.ndarray:
    if np.issubdtype(image.dtype, np.integer):
        image = image.astype(np.float64) / np.iinfo(image.dtype).max
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    return image[..., :3]


def _read_plain_ppm(path: Path) -> np.ndarray:
    tokens = []
    for line in path.read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    width, height, maxval = (int(t) for t in tokens[1:4])
    values = np.array(tokens[4 : 4 + 3 * width * height], dtype=np.float64)
    return values.reshape(height, width, 3) / maxval


def read_image(path: PathLike) -> np.ndarray:
    """(H,W,3) float image in [0, 1] from PNG or PPM."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"P3":
        return _read_plain_ppm(path)
    return _to_float(iio.imread(path))


def write_image(path: PathLike, image: np.ndarray) -> None:
    """8-bit PNG, or plain-text PPM when the suffix is ``.ppm``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w = data.shape[:2]
        with open(path, "w") as f:
            f.write(f"P3\n{w} {h}\n255\n")
            np.savetxt(f, data.reshape(h, w * 3), fmt="%d")
    else:
        iio.imwrite(path, data)
    logger.debug(f"Wrote image {path}")


def write_depth(
    path: PathLike, depth: np.ndarray, valid: np.ndarray, far: float
) -> float:
    """16-bit depth PNG plus a ``.txt`` sidecar with ``depth = value / scale``.

    Invalid pixels are stored as 0. Returns the scale.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scale = float(np.floor(65535.0 / far))
    values = np.where(valid, np.clip(np.round(depth * scale), 1, 65535), 0)
    iio.imwrite(path, values.astype(np.uint16))
    with open(path.with_suffix(".txt"), "w") as f:
        yaml.safe_dump({"scale": scale, "invalid": 0, "units": "scene"}, f)
    logger.debug(f"Wrote depth map {path} (scale {scale})")
    return scale


def read_depth(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path.with_suffix(".txt")) as f:
        scale = float(yaml.safe_load(f)["scale"])
    values = iio.imread(path).astype(np.float64)
    valid = values > 0
    depth = np.where(valid, values / scale, np.inf)
    return depth, valid


@dataclass(eq=False)
class ImageFolder:
    images: List[np.ndarray]
    names: List[str]
    poses: Optional[List[SE3Pose]]
    intrinsics: Optional[Intrinsics]


def load_image_folder(path: PathLike) -> ImageFolder:
    """Read ``images/*.png`` with optional ``poses.txt`` and ``intrinsics.txt``."""
    root = Path(path)
    files = sorted((root / "images").glob("*.png"))
    if not files:
        raise FileNotFoundError(f"No PNG images under {root / 'images'}")
    images = [read_image(f) for f in files]
    poses = None
    if (root / "poses.txt").exists():
        poses = load_poses(root / "poses.txt")
        if len(poses) != len(images):
            raise ValueError(f"{len(poses)} poses for {len(images)} images in {root}")
    else:
        logger.warning(f"No poses.txt in {root}; pose metrics unavailable")
    intrinsics = None
    if (root / "intrinsics.txt").exists():
        fx, fy, cx, cy = np.loadtxt(root / "intrinsics.txt").ravel()[:4]
        h, w = images[0].shape[:2]
        intrinsics = Intrinsics(float(fx), float(fy), float(cx), float(cy), w, h)
    logger.info(f"Loaded {len(images)} images from {root}")
    return ImageFolder(images, [f.stem for f in files], poses, intrinsics)
