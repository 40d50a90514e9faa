import logging
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .errors import AnnotationFormatError, InputError
from .models import NUM_KEYPOINTS, FloatArray, Pose, SkeletonFeatureMap, SkeletonSpec
from .pose_model import SKELETON

logger = logging.getLogger(__name__)

SIGMA_FRACTION = 0.06
LIMB_WIDTH_FRACTION = 0.03
TENSOR_MAGIC = b"P2SFEAT1"


def default_sigma(size: int) -> float:
    return SIGMA_FRACTION * size


def default_limb_width(size: int) -> float:
    return LIMB_WIDTH_FRACTION * size


def part_confidence_maps(
    pose: Pose, size: int = 64, sigma: float | None = None
) -> FloatArray:
    """One Gaussian exp(-d^2 / sigma^2) per valid joint; invalid joints stay zero."""
    sigma = default_sigma(size) if sigma is None else sigma
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    maps = np.zeros((NUM_KEYPOINTS, size, size))
    for j, kp in enumerate(pose.keypoints):
        if kp.valid:
            maps[j] = np.exp(-((cols - kp.x) ** 2 + (rows - kp.y) ** 2) / sigma**2)
    return maps


def paf_maps(
    pose: Pose,
    skeleton: SkeletonSpec = SKELETON,
    size: int = 64,
    limb_width: float | None = None,
) -> FloatArray:
    """
    Two channels per limb holding the limb's unit direction on its support.

    A pixel p supports limb a->b when its projection falls on the segment and
    its perpendicular distance is at most limb_width. Comparisons are made on
    squared quantities so mirrored poses rasterize exactly mirrored.
    """
    limb_width = default_limb_width(size) if limb_width is None else limb_width
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    maps = np.zeros((2 * len(skeleton.limbs), size, size))
    for index, (a, b) in enumerate(skeleton.limbs):
        start, end = pose.keypoints[a], pose.keypoints[b]
        if not (start.valid and end.valid):
            continue
        dx, dy = end.x - start.x, end.y - start.y
        length_sq = dx * dx + dy * dy
        if length_sq == 0:
            continue
        rx, ry = cols - start.x, rows - start.y
        along = rx * dx + ry * dy
        across = rx * dy - ry * dx
        support = (along >= 0) & (along <= length_sq) & (across**2 <= limb_width**2 * length_sq)
        length = np.sqrt(length_sq)
        maps[2 * index][support] = dx / length
        maps[2 * index + 1][support] = dy / length
    return maps


def skeleton_features(
    pose: Pose,
    size: int = 64,
    sigma: float | None = None,
    limb_width: float | None = None,
) -> SkeletonFeatureMap:
    """The 55-channel stack: 17 confidence maps then 38 PAF channels."""
    raster = np.concatenate(
        [
            part_confidence_maps(pose, size, sigma),
            paf_maps(pose, SKELETON, size, limb_width),
        ]
    ).astype(np.float32)
    return SkeletonFeatureMap(raster=raster)


def write_feature_tensor(path: Path, raster: NDArray[np.float32]) -> Path:
    """Magic, uint32 ndim, uint32 dims, then little-endian float32 data in C order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(raster, dtype="<f4")
    header = np.array([data.ndim, *data.shape], dtype="<u4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(header.tobytes())
        f.write(data.tobytes())
    return path


def read_feature_tensor(path: Path) -> NDArray[np.float32]:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    if payload[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise AnnotationFormatError(f"{path} is not a skeleton feature tensor")
    offset = len(TENSOR_MAGIC)
    ndim = int(np.frombuffer(payload, dtype="<u4", count=1, offset=offset)[0])
    dims = np.frombuffer(payload, dtype="<u4", count=ndim, offset=offset + 4)
    shape = tuple(int(d) for d in dims)
    offset += 4 * (ndim + 1)
    expected = int(np.prod(shape)) * 4
    if len(payload) - offset != expected:
        raise AnnotationFormatError(
            f"{path} holds {len(payload) - offset} data bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(payload, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def save_channel_previews(features: SkeletonFeatureMap, directory: Path) -> list[Path]:
    """PNG per confidence channel and per limb (PAF magnitude)."""
    directory.mkdir(parents=True, exist_ok=True)
    channels = list(features.confidence) + [
        np.hypot(features.pafs[2 * i], features.pafs[2 * i + 1])
        for i in range(features.pafs.shape[0] // 2)
    ]
    paths: list[Path] = []
    for index, channel in enumerate(channels):
        path = directory / f"channel_{index:02d}.png"
        Image.fromarray((np.clip(channel, 0.0, 1.0) * 255).round().astype(np.uint8)).save(path)
        paths.append(path)
    return paths
