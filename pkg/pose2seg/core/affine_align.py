import logging
import math
from collections.abc import Sequence
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import map_coordinates

from .errors import DegenerateConfigurationError, DimensionMismatchError
from .evaluation import keypoints_to_bbox
from .models import (
    MIN_TEMPLATE_JOINTS,
    AlignedWindow,
    AlignTransform,
    BBox,
    BoolArray,
    FloatArray,
    Pose,
    PoseTemplate,
)
from .pose_model import MIRROR_INDEX, flip_pose, transform_pose
from .utils import square_roi

logger = logging.getLogger(__name__)

DEFAULT_ALIGN_SIZE = 64
DEFAULT_MASK_THRESHOLD = 0.5


def estimate_similarity(
    src: NDArray[Any], dst: NDArray[Any]
) -> tuple[FloatArray, float]:
    """
    Least-squares similarity transform (rotation, uniform scale, translation).

    Closed-form Umeyama solution with the reflection case excluded.

    Args:
        src: (n, 2) source points, n >= 3.
        dst: (n, 2) target points.

    Returns:
        The 2x3 matrix H minimizing sum ||H.p_i - q_i||^2 and that minimum.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if src.shape != dst.shape:
        raise DimensionMismatchError(
            f"{len(src)} source points but {len(dst)} target points"
        )
    if len(src) < MIN_TEMPLATE_JOINTS:
        raise DegenerateConfigurationError(
            f"need at least {MIN_TEMPLATE_JOINTS} correspondences, got {len(src)}"
        )
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    var_src = float(np.sum(src_c**2)) / len(src)
    var_dst = float(np.sum(dst_c**2)) / len(dst)
    tolerance = 1e-24 * max(1.0, float(np.max(np.abs(src))) ** 2)
    if var_src <= tolerance:
        raise DegenerateConfigurationError("all source points are coincident")
    if var_dst <= 1e-24 * max(1.0, float(np.max(np.abs(dst))) ** 2):
        raise DegenerateConfigurationError("all target points are coincident")

    covariance = dst_c.T @ src_c / len(src)
    u, d, vt = np.linalg.svd(covariance)
    s = np.eye(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[1, 1] = -1.0
    rotation = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s)) / var_src
    if scale <= 1e-12:
        raise DegenerateConfigurationError("best rotation-only fit collapses to zero scale")
    translation = mu_dst - scale * rotation @ mu_src
    matrix = np.hstack([scale * rotation, translation[:, None]])
    residual = float(np.sum((src @ matrix[:, :2].T + matrix[:, 2] - dst) ** 2))
    return matrix, residual


def _mirror_matrix(width: float) -> FloatArray:
    return np.array([[-1.0, 0.0, width], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def fit_to_template(
    pose: Pose,
    template: PoseTemplate,
    target_size: int = DEFAULT_ALIGN_SIZE,
    template_index: int = 0,
) -> AlignTransform | None:
    """
    Fit the pose onto one template, trying both the pose and its mirror image.

    Returns:
        The candidate with the smaller residual, or None when fewer than three
        joints are valid in both the pose and the template.
    """
    target = template.mean_array()[:, :2] * target_size
    template_valid = template.valid_array()
    best: AlignTransform | None = None
    best_residual = math.inf
    for flipped in (False, True):
        candidate = flip_pose(pose) if flipped else pose
        array = candidate.to_array()
        common: BoolArray = (array[:, 2] > 0) & template_valid
        if common.sum() < MIN_TEMPLATE_JOINTS:
            continue
        try:
            matrix, residual = estimate_similarity(array[common, :2], target[common])
        except DegenerateConfigurationError:
            continue
        if flipped:
            matrix = (np.vstack([matrix, [0.0, 0.0, 1.0]]) @ _mirror_matrix(pose.space.width))[:2]
        # Residual in template (unit-square) units so scores compare across templates.
        residual /= target_size**2
        if best is None or residual < best_residual:
            best_residual = residual
            best = AlignTransform.from_array(
                matrix,
                flipped=flipped,
                residual=residual,
                score=math.exp(-residual),
                template_index=template_index,
            )
    return best


def select_template(
    pose: Pose,
    bank: Sequence[PoseTemplate],
    target_size: int = DEFAULT_ALIGN_SIZE,
) -> AlignTransform:
    """Best-scoring template fit; the whole image is aligned when none resolves."""
    if not bank:
        raise DegenerateConfigurationError("template bank is empty")
    best: AlignTransform | None = None
    for index, template in enumerate(bank):
        candidate = fit_to_template(pose, template, target_size, template_index=index)
        if candidate is not None and (best is None or candidate.score > best.score):
            best = candidate
    if best is None:
        logger.debug("No template shares three valid joints with the pose, aligning whole image")
        return whole_image_fallback((pose.space.width, pose.space.height), target_size)
    return best


def _square_to_window(x0: float, y0: float, side: float, target_size: int) -> FloatArray:
    scale = target_size / side
    return np.array([[scale, 0.0, -scale * x0], [0.0, scale, -scale * y0]])


def whole_image_fallback(
    image_size: tuple[float, float], target_size: int = DEFAULT_ALIGN_SIZE
) -> AlignTransform:
    """Map the centered square of side max(W, H) onto the window. Scores 0."""
    width, height = image_size
    if width <= 0 or height <= 0 or target_size <= 0:
        raise DegenerateConfigurationError(f"invalid sizes {image_size}, {target_size}")
    side = max(width, height)
    matrix = _square_to_window((width - side) / 2, (height - side) / 2, side, target_size)
    return AlignTransform.from_array(
        matrix,
        residual=None,
        score=0.0,
        template_index=-1,
        strategy="fallback",
    )


def roi_align_transform(bbox: BBox, target_size: int = DEFAULT_ALIGN_SIZE) -> AlignTransform:
    """Box-based alignment: the square RoI around the bbox, no rotation."""
    x0, y0, side = square_roi(bbox)
    return AlignTransform.from_array(
        _square_to_window(x0, y0, side, target_size), strategy="bbox"
    )


def _sample(raster: FloatArray, rows: FloatArray, cols: FloatArray) -> FloatArray:
    """Bilinear sampling at pixel-center coordinates, zero outside."""
    coords = np.stack([rows, cols])
    if raster.ndim == 2:
        return map_coordinates(raster, coords, order=1, mode="constant", cval=0.0)
    return np.stack(
        [
            map_coordinates(raster[..., c], coords, order=1, mode="constant", cval=0.0)
            for c in range(raster.shape[-1])
        ],
        axis=-1,
    )


def warp_window(
    image: NDArray[Any],
    transform: AlignTransform,
    target_size: int = DEFAULT_ALIGN_SIZE,
    image_id: int | None = None,
) -> AlignedWindow:
    """
    Resample an image (any channel count) into the aligned window.

    Args:
        image: (H, W) or (H, W, C) raster.
        transform: Maps source pixel coordinates to window coordinates.
        target_size: Window side S.
        image_id: Source image id stored on the window.

    Returns:
        The S x S window; samples falling outside the image are zero.
    """
    raster = np.asarray(image, dtype=float)
    if raster.size == 0 or raster.ndim not in (2, 3):
        raise DimensionMismatchError(f"cannot warp an image of shape {raster.shape}")
    inverse = transform.inverse_matrix()
    rows, cols = np.mgrid[0:target_size, 0:target_size].astype(float)
    src_x = inverse[0, 0] * cols + inverse[0, 1] * rows + inverse[0, 2]
    src_y = inverse[1, 0] * cols + inverse[1, 1] * rows + inverse[1, 2]
    return AlignedWindow(
        pixels=_sample(raster, src_y, src_x),
        transform=transform,
        size=target_size,
        image_id=image_id,
    )


def inverse_warp(
    raster: NDArray[Any], transform: AlignTransform, image_size: tuple[int, int]
) -> FloatArray:
    """Bring a window raster back to the (W, H) image, zero outside the window."""
    window = np.asarray(raster, dtype=float)
    transform.inverse_matrix()  # singular transforms cannot be undone
    width, height = image_size
    matrix = transform.matrix_array()
    rows, cols = np.mgrid[0:height, 0:width].astype(float)
    win_x = matrix[0, 0] * cols + matrix[0, 1] * rows + matrix[0, 2]
    win_y = matrix[1, 0] * cols + matrix[1, 1] * rows + matrix[1, 2]
    return _sample(window, win_y, win_x)


def inverse_warp_mask(
    mask: NDArray[Any],
    transform: AlignTransform,
    image_size: tuple[int, int],
    threshold: float = DEFAULT_MASK_THRESHOLD,
) -> BoolArray:
    """Binary (H, W) mask: inverse-warped probabilities at or above threshold."""
    return inverse_warp(mask, transform, image_size) >= threshold


def keypoint_box_transform(
    pose: Pose,
    expand: float = 0.0,
    target_size: int = DEFAULT_ALIGN_SIZE,
    image_size: tuple[float, float] | None = None,
) -> AlignTransform:
    """Box-based alignment on the (expanded) box spanned by the valid keypoints."""
    return roi_align_transform(keypoints_to_bbox(pose, expand, image_size), target_size)


def aligned_pose(
    pose: Pose, transform: AlignTransform, target_size: int = DEFAULT_ALIGN_SIZE
) -> Pose:
    """
    The pose as seen in the aligned window.

    A flipped transform mirrors the image, so left and right joints trade
    channels to stay anatomically labeled.
    """
    warped = transform_pose(pose, transform.matrix_array(), target_size)
    if not transform.flipped:
        return warped
    return Pose(
        keypoints=tuple(warped.keypoints[MIRROR_INDEX[i]] for i in range(len(MIRROR_INDEX))),
        space=warped.space,
    )
