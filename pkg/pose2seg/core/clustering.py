import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy.spatial.distance import cdist

from .errors import (
    AnnotationFormatError,
    ConfigError,
    InsufficientDataError,
    TemplateValidityError,
)
from .models import (
    MIN_TEMPLATE_JOINTS,
    BBox,
    ClusteringResult,
    Dataset,
    FloatArray,
    Pose,
    PoseTemplate,
    TemplateBank,
)
from .pose_model import KEYPOINT_NAMES, MIN_CLUSTERING_JOINTS, valid_count
from .utils import read_json, square_roi, write_json

logger = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_MAX_ITER = 300


def normalize_pose(pose: Pose, bbox: BBox) -> Pose:
    """
    Crop the square RoI centered on the bbox and rescale it to the unit square.

    Args:
        pose: Pixel-space pose.
        bbox: (x, y, w, h) of the instance.

    Returns:
        Unit-square pose. Joints that fall outside the RoI are not-in-image.
    """
    x0, y0, side = square_roi(bbox)
    array = pose.to_array()
    array[:, 0] = (array[:, 0] - x0) / side
    array[:, 1] = (array[:, 1] - y0) / side
    outside = (array[:, :2] < 0).any(axis=1) | (array[:, :2] > 1).any(axis=1)
    array[outside, 2] = 0
    return Pose.from_array(array)


def pose_distance(p: Pose, q: Pose) -> float:
    """Sum over joints of the squared distance between (x, y, v) vectors."""
    return float(np.sum((p.to_array() - q.to_array()) ** 2))


def _kmeans_plus_plus(
    points: FloatArray, k: int, rng: np.random.Generator
) -> FloatArray:
    n = len(points)
    centres = [points[int(rng.integers(n))]]
    closest = cdist(points, np.array(centres), "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(n, p=closest / total))
        else:
            index = int(rng.integers(n))
        centres.append(points[index])
        closest = np.minimum(
            closest, cdist(points, points[index : index + 1], "sqeuclidean")[:, 0]
        )
    return np.array(centres)


def _update_centres(
    points: FloatArray, labels: np.ndarray, k: int
) -> FloatArray:
    """Cluster means; an empty cluster takes over the pose farthest from its mean."""
    centres = np.zeros((k, points.shape[1]))
    while True:
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts):
            centres[j] = points[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return centres
        spread = np.sum((points - centres[labels]) ** 2, axis=1)
        # Members of singleton clusters cannot move without emptying another one.
        spread[counts[labels] <= 1] = -1.0
        farthest = int(np.argmax(spread))
        logger.debug(f"Re-seeding empty cluster {empty[0]} from pose {farthest}")
        labels[farthest] = empty[0]


def kmeans_templates(
    poses: Sequence[Pose],
    k: int = DEFAULT_K,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
) -> ClusteringResult:
    """
    Cluster normalized poses into k templates with Lloyd iterations.

    Args:
        poses: Unit-square poses; those with 8 or fewer valid joints are dropped.
        k: Number of templates.
        seed: Seed of the k-means++ initialization.
        max_iter: Maximum number of Lloyd iterations.

    Returns:
        Templates, one assignment per input pose (-1 for dropped poses), final
        objective and the objective recorded at every iteration.
    """
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be at least 1, got {max_iter}")
    kept_index = [i for i, pose in enumerate(poses) if valid_count(pose) >= MIN_CLUSTERING_JOINTS]
    kept = [poses[i] for i in kept_index]
    if len(kept) < k:
        raise InsufficientDataError(
            f"{len(kept)} poses with more than {MIN_CLUSTERING_JOINTS - 1} valid joints, "
            f"need at least K={k}",
            available=len(kept),
            k=k,
        )
    points = np.stack([pose.to_array().ravel() for pose in kept])
    rng = np.random.default_rng(seed)

    centres = _kmeans_plus_plus(points, k, rng)
    labels = cdist(points, centres, "sqeuclidean").argmin(axis=1)
    history: list[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        centres = _update_centres(points, labels, k)
        objective = float(np.sum((points - centres[labels]) ** 2))
        history.append(objective)
        new_labels = cdist(points, centres, "sqeuclidean").argmin(axis=1)
        if np.array_equal(new_labels, labels):
            converged = True
            break
        if iteration == max_iter:
            break  # keep labels consistent with the reported centres
        labels = new_labels

    templates = [PoseTemplate.from_mean(centre) for centre in centres]
    unusable = [i for i, template in enumerate(templates) if not template.usable]
    for i in unusable:
        logger.warning(
            f"Template {i} has only {templates[i].valid_count} valid joints and "
            "cannot be used for alignment"
        )
    logger.info(
        f"K-means on {len(kept)} poses: K={k}, {iteration} iterations, "
        f"objective {history[-1]:.4f}, converged={converged}"
    )
    assignments = [-1] * len(poses)
    for i, label in zip(kept_index, labels):
        assignments[i] = int(label)
    return ClusteringResult(
        templates=templates,
        assignments=assignments,
        objective=history[-1],
        iterations=iteration,
        converged=converged,
        history=history,
        unusable_templates=unusable,
    )


def collect_training_poses(dataset: Dataset) -> list[Pose]:
    """Normalized poses of every non-crowd person with enough valid joints."""
    poses: list[Pose] = []
    for instance in dataset.instances:
        if instance.iscrowd or instance.keypoints is None:
            continue
        if not (instance.bbox[2] > 0 and instance.bbox[3] > 0):
            continue
        if valid_count(instance.keypoints) < MIN_CLUSTERING_JOINTS:
            continue
        normalized = normalize_pose(instance.keypoints, instance.bbox)
        if valid_count(normalized) >= MIN_CLUSTERING_JOINTS:
            poses.append(normalized)
    return poses


def template_bank(result: ClusteringResult) -> TemplateBank:
    return TemplateBank(
        K=len(result.templates),
        joint_names=list(KEYPOINT_NAMES),
        templates=result.templates,
    )


def save_template_bank(bank: TemplateBank, path: Path) -> Path:
    return write_json(path, bank.model_dump(mode="json", exclude={"metadata"}))


def load_template_bank(path: Path) -> TemplateBank:
    document = read_json(path)
    try:
        bank = TemplateBank.model_validate(document)
    except ValidationError as e:
        raise AnnotationFormatError(f"{path} is not a template bank: {e}") from e
    if bank.joint_names != list(KEYPOINT_NAMES):
        raise AnnotationFormatError(
            f"{path} uses a different joint order than the COCO 17-joint layout"
        )
    for index in bank.unusable():
        raise TemplateValidityError(
            f"template {index} in {path} has {bank.templates[index].valid_count} valid "
            f"joints, alignment needs at least {MIN_TEMPLATE_JOINTS}",
            template_index=index,
        )
    return bank
