import numpy as np
import pytest

from .core.errors import InvalidKeypointError
from .core.models import (
    MISSING_KEYPOINT,
    NUM_KEYPOINTS,
    CoordinateSpace,
    EncodedKeypoint,
    Pose,
)
from .core.pose_model import (
    KEYPOINT_NAMES,
    MIRROR_INDEX,
    SKELETON,
    encode_keypoint,
    flip_pose,
    pose_from_coco,
    pose_to_coco,
    transform_pose,
    valid_count,
)


def random_pose(rng: np.random.Generator, space: CoordinateSpace | None = None) -> Pose:
    space = space or CoordinateSpace()
    array = np.zeros((NUM_KEYPOINTS, 3))
    array[:, 0] = rng.uniform(0, space.width, NUM_KEYPOINTS)
    array[:, 1] = rng.uniform(0, space.height, NUM_KEYPOINTS)
    array[:, 2] = rng.integers(0, 3, NUM_KEYPOINTS)
    return Pose.from_array(array, space)


def test_encode_keypoint() -> None:
    assert encode_keypoint(0.2, 0.3, 2).model_dump() == {"x": 0.2, "y": 0.3, "v": 2}
    assert encode_keypoint(0.2, 0.3, 1).v == 1
    assert encode_keypoint(0.9, 0.9, 0) == MISSING_KEYPOINT
    assert encode_keypoint(5.0, 5.0, 0) == MISSING_KEYPOINT  # coordinates ignored


@pytest.mark.parametrize("x, y, code", [(0.5, 0.5, 3), (1.2, 0.5, 2), (0.5, -0.1, 1)])
def test_encode_keypoint_rejects(x: float, y: float, code: int) -> None:
    with pytest.raises(InvalidKeypointError):
        encode_keypoint(x, y, code)


def test_missing_keypoint_sentinel() -> None:
    assert (MISSING_KEYPOINT.x, MISSING_KEYPOINT.y, MISSING_KEYPOINT.v) == (0.5, 0.5, 0)
    with pytest.raises(ValueError):
        EncodedKeypoint(x=0.1, y=0.1, v=0)


def test_pose_length_is_checked() -> None:
    with pytest.raises(ValueError):
        Pose(keypoints=(MISSING_KEYPOINT,) * 16)


def test_taxonomy() -> None:
    assert len(KEYPOINT_NAMES) == NUM_KEYPOINTS
    assert len(SKELETON.limbs) == 19
    assert all(MIRROR_INDEX[MIRROR_INDEX[i]] == i for i in range(NUM_KEYPOINTS))
    assert KEYPOINT_NAMES[MIRROR_INDEX[5]] == "right_shoulder"
    assert MIRROR_INDEX[0] == 0


def test_pose_from_coco_marks_outside_joints() -> None:
    flat = [0.0] * (3 * NUM_KEYPOINTS)
    flat[0:3] = [10, 20, 2]
    flat[3:6] = [150, 20, 2]  # beyond width 100
    flat[6:9] = [30, 40, 1]
    pose, outside = pose_from_coco(flat, 100, 80)
    assert outside == [1]
    assert pose.keypoints[0].model_dump() == {"x": 10.0, "y": 20.0, "v": 2}
    assert pose.keypoints[1] == MISSING_KEYPOINT
    assert pose.keypoints[2].v == 1
    assert valid_count(pose) == 2
    assert pose_to_coco(pose)[:9] == [10.0, 20.0, 2, 0, 0, 0, 30.0, 40.0, 1]


def test_pose_from_coco_rejects_bad_length() -> None:
    with pytest.raises(InvalidKeypointError):
        pose_from_coco([0.0] * 50, 100, 100)


def test_flip_pose_is_an_involution() -> None:
    rng = np.random.default_rng(0)
    for space in (CoordinateSpace(), CoordinateSpace.pixel(640, 480)):
        for _ in range(20):
            pose = random_pose(rng, space)
            assert flip_pose(flip_pose(pose)).to_array() == pytest.approx(pose.to_array())


def test_flip_pose_swaps_sides() -> None:
    array = np.tile([0.5, 0.5, 0.0], (NUM_KEYPOINTS, 1))
    array[5] = [0.2, 0.4, 2]  # left shoulder
    flipped = flip_pose(Pose.from_array(array))
    assert flipped.keypoints[6].model_dump() == {"x": pytest.approx(0.8), "y": 0.4, "v": 2}
    assert flipped.keypoints[5] == MISSING_KEYPOINT

    pixel = Pose.from_array(array * [100, 100, 1], CoordinateSpace.pixel(100, 100))
    assert flip_pose(pixel).keypoints[6].x == pytest.approx(80.0)


def test_transform_pose_drops_joints_outside_frame() -> None:
    array = np.tile([0.5, 0.5, 0.0], (NUM_KEYPOINTS, 1))
    array[0] = [10, 10, 2]
    array[1] = [60, 10, 2]
    pose = Pose.from_array(array, CoordinateSpace.pixel(100, 100))
    matrix = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    moved = transform_pose(pose, matrix, 32)
    assert moved.keypoints[0].model_dump() == {"x": 10.0, "y": 10.0, "v": 2}
    assert not moved.keypoints[1].valid
    assert moved.space == CoordinateSpace.pixel(32, 32)
