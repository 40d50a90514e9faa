import json
from importlib.resources import files
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidKeypointError
from .models import (
    MISSING_KEYPOINT,
    NUM_KEYPOINTS,
    UNIT_SQUARE,
    CoordinateSpace,
    EncodedKeypoint,
    KeypointSpec,
    Pose,
    SkeletonSpec,
)

_TAXONOMY: dict[str, Any] = json.loads(
    files("pose2seg.core").joinpath("keypoints.json").read_text()
)

KEYPOINT_SPECS: tuple[KeypointSpec, ...] = tuple(
    KeypointSpec.model_validate(spec) for spec in _TAXONOMY["keypoints"]
)
KEYPOINT_NAMES: tuple[str, ...] = tuple(spec.name for spec in KEYPOINT_SPECS)
MIRROR_INDEX: tuple[int, ...] = tuple(spec.mirror_index for spec in KEYPOINT_SPECS)
SKELETON = SkeletonSpec(limbs=tuple((a, b) for a, b in _TAXONOMY["limbs"]))

# More than 8 valid joints are needed for a pose to take part in clustering.
MIN_CLUSTERING_JOINTS = 9


def encode_keypoint(
    x: float, y: float, code: int, space: CoordinateSpace = UNIT_SQUARE
) -> EncodedKeypoint:
    """
    Encode a raw COCO keypoint triple.

    Args:
        x: Horizontal coordinate in `space` units.
        y: Vertical coordinate in `space` units.
        code: COCO visibility (0 not labeled, 1 labeled but hidden, 2 visible).
        space: Space the coordinates are expressed in.

    Returns:
        (x, y, 2) when visible, (x, y, 1) when hidden, (0.5, 0.5, 0) otherwise.
    """
    if code not in (0, 1, 2):
        raise InvalidKeypointError(f"unknown visibility code {code}", code=code)
    if code == 0:
        return MISSING_KEYPOINT
    if not space.contains(x, y):
        raise InvalidKeypointError(
            f"keypoint ({x}, {y}) lies outside the {space.kind} space "
            f"{space.width}x{space.height}"
        )
    return EncodedKeypoint(x=x, y=y, v=code)  # type: ignore[arg-type]


def pose_from_coco(
    flat: list[float], width: float, height: float
) -> tuple[Pose, list[int]]:
    """Build a pixel-space pose from a flat COCO keypoint list.

    Labeled joints outside the image are encoded as not-in-image; their
    indices are returned alongside the pose.
    """
    if len(flat) != 3 * NUM_KEYPOINTS:
        raise InvalidKeypointError(
            f"expected {3 * NUM_KEYPOINTS} keypoint values, got {len(flat)}"
        )
    space = CoordinateSpace.pixel(width, height)
    keypoints: list[EncodedKeypoint] = []
    outside: list[int] = []
    for i in range(NUM_KEYPOINTS):
        x, y, code = flat[3 * i : 3 * i + 3]
        try:
            keypoints.append(encode_keypoint(float(x), float(y), int(code), space))
        except InvalidKeypointError:
            if int(code) not in (1, 2):
                raise
            keypoints.append(MISSING_KEYPOINT)
            outside.append(i)
    return Pose(keypoints=tuple(keypoints), space=space), outside


def pose_to_coco(pose: Pose) -> list[float]:
    flat: list[float] = []
    for kp in pose.keypoints:
        flat.extend([kp.x, kp.y, kp.v] if kp.valid else [0, 0, 0])
    return flat


def valid_count(pose: Pose) -> int:
    return sum(kp.valid for kp in pose.keypoints)


def flip_pose(pose: Pose) -> Pose:
    """Mirror a pose left-right and swap left/right joint channels.

    Valid x coordinates become `width - x` (1 - x in the unit square).
    """
    keypoints = tuple(
        EncodedKeypoint(x=pose.space.width - kp.x, y=kp.y, v=kp.v)
        if kp.valid
        else MISSING_KEYPOINT
        for kp in (pose.keypoints[MIRROR_INDEX[i]] for i in range(NUM_KEYPOINTS))
    )
    return Pose(keypoints=keypoints, space=pose.space)


def apply_matrix(points: NDArray[Any], matrix: NDArray[Any]) -> NDArray[np.float64]:
    """Apply a 2x3 matrix to an (n, 2) array of points."""
    m = np.asarray(matrix, dtype=float)
    return np.asarray(points, dtype=float) @ m[:, :2].T + m[:, 2]


def transform_pose(pose: Pose, matrix: NDArray[Any], size: int) -> Pose:
    """Map a pose into the size x size aligned frame.

    Joints landing outside the frame are treated as not in image.
    """
    array = pose.to_array()
    valid = array[:, 2] > 0
    array[valid, :2] = apply_matrix(array[valid, :2], matrix)
    space = CoordinateSpace.pixel(size, size)
    inside = (
        (array[:, 0] >= 0) & (array[:, 0] <= size) & (array[:, 1] >= 0) & (array[:, 1] <= size)
    )
    array[~inside, 2] = 0
    return Pose.from_array(array, space)
