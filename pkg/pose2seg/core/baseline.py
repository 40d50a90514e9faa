import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Literal

import numpy as np
from scipy.ndimage import binary_dilation
from skimage.morphology import disk

from .affine_align import (
    DEFAULT_ALIGN_SIZE,
    aligned_pose,
    inverse_warp_mask,
    keypoint_box_transform,
    roi_align_transform,
    select_template,
    whole_image_fallback,
)
from .errors import ConfigError, Pose2SegError
from .evaluation import ALL, average_precision, ground_truths
from .models import (
    AlignTransform,
    ApReport,
    Dataset,
    EvalBin,
    FloatArray,
    InstanceAnnotation,
    LayerSpec,
    Prediction,
    SkeletonFeatureMap,
    TemplateBank,
)
from .skeleton_features import skeleton_features

logger = logging.getLogger(__name__)

Strategy = Literal["pose", "bbox", "kpt-bbox"]

DEFAULT_DILATION = 3
DEFAULT_EXPANDS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_UNITS = (5, 10, 15, 20)


def baseline_segment(features: SkeletonFeatureMap, dilation: int = DEFAULT_DILATION) -> FloatArray:
    """
    Non-learned stand-in segmenter: skeleton support grown by a disk.

    The support is every pixel where a confidence map exceeds 0.5 or a PAF
    channel is non-zero.
    """
    if dilation < 0:
        raise ConfigError(f"dilation must be non-negative, got {dilation}")
    support = (features.confidence > 0.5).any(axis=0) | (features.pafs != 0).any(axis=0)
    if dilation > 0 and support.any():
        support = binary_dilation(support, structure=disk(dilation))
    return support.astype(np.float64)


def receptive_field(
    layers: Sequence[LayerSpec], residual_conv_count: int = 1, residual_kernel: int = 3
) -> float:
    """
    Receptive field of one output unit, in input pixels.

    Each conv grows the field by (kernel - 1) * jump and multiplies jump by its
    stride. A residual unit expands to `residual_conv_count` convs of
    `residual_kernel`, its stride applied on the first. An upsample divides
    jump by its stride before its kernel is applied.
    """
    if not layers:
        raise ConfigError("receptive field of an empty layer stack")
    if residual_conv_count < 0 or residual_kernel < 1:
        raise ConfigError("residual units need a non-negative conv count and kernel >= 1")
    field, jump = 1.0, 1.0
    for layer in layers:
        if layer.kind == "upsample":
            jump /= layer.stride
            field += (layer.kernel - 1) * jump
        elif layer.kind == "residual_unit":
            for i in range(residual_conv_count):
                field += (residual_kernel - 1) * jump
                if i == 0:
                    jump *= layer.stride
        else:
            field += (layer.kernel - 1) * jump
            jump *= layer.stride
    return field


def segmodule_layers(units: int) -> list[LayerSpec]:
    """7x7 stride-2 conv, `units` residual units, x2 upsample, one residual unit, 1x1 conv."""
    if units < 0:
        raise ConfigError(f"unit count must be non-negative, got {units}")
    return [
        LayerSpec(kernel=7, stride=2),
        *(LayerSpec(kernel=3, kind="residual_unit") for _ in range(units)),
        LayerSpec(kernel=1, stride=2, kind="upsample"),
        LayerSpec(kernel=3, kind="residual_unit"),
        LayerSpec(kernel=1),
    ]


def receptive_field_table(
    units: Sequence[int] = DEFAULT_UNITS, residual_conv_count: int = 1, residual_kernel: int = 3
) -> dict[int, float]:
    return {
        n: receptive_field(segmodule_layers(n), residual_conv_count, residual_kernel)
        for n in units
    }


def _alignment(
    instance: InstanceAnnotation,
    bank: TemplateBank | None,
    strategy: Strategy,
    size: int,
    expand: float,
    image_size: tuple[int, int],
) -> AlignTransform:
    assert instance.keypoints is not None
    if strategy == "pose":
        if bank is None:
            raise ConfigError("pose alignment needs a template bank")
        return select_template(instance.keypoints, bank.templates, size)
    try:
        if strategy == "bbox":
            return roi_align_transform(instance.bbox, size)
        return keypoint_box_transform(instance.keypoints, expand, size, image_size)
    except Pose2SegError as e:
        logger.debug(f"Instance {instance.id}: {e}, aligning whole image")
        return whole_image_fallback(image_size, size)


def segment_dataset(
    dataset: Dataset,
    bank: TemplateBank | None,
    strategy: Strategy = "pose",
    size: int = DEFAULT_ALIGN_SIZE,
    expand: float = 0.0,
    sigma: float | None = None,
    limb_width: float | None = None,
    dilation: int = DEFAULT_DILATION,
    workers: int = 1,
) -> list[Prediction]:
    """
    Align, rasterize the skeleton, segment with the baseline and warp back.

    Args:
        dataset: Images and person instances with keypoints.
        bank: Templates for pose alignment; unused by box strategies.
        strategy: "pose" (template fit), "bbox" (ground-truth box) or
            "kpt-bbox" (box around the keypoints grown by `expand`).
        size: Aligned window side.
        expand: Growth factor of keypoint boxes.
        sigma: Confidence map spread, default 0.06 * size.
        limb_width: PAF half-width, default 0.03 * size.
        dilation: Baseline dilation radius in window pixels.
        workers: Threads segmenting instances in parallel.

    Returns:
        One prediction per non-crowd instance with keypoints, carrying the
        instance id. Pose alignments are scored by their fit, box alignments 1.
    """
    instances = [i for i in dataset.instances if not i.iscrowd and i.keypoints is not None]
    skipped = len(dataset.instances) - len(instances)
    if skipped:
        logger.info(f"Skipping {skipped} crowd or keypoint-less instances")

    def segment(instance: InstanceAnnotation) -> Prediction:
        assert instance.keypoints is not None
        image = dataset.images[instance.image_id]
        image_size = (image.width, image.height)
        transform = _alignment(instance, bank, strategy, size, expand, image_size)
        if transform.is_fallback:
            logger.warning(f"Instance {instance.id} aligned on the whole image")
        features = skeleton_features(
            aligned_pose(instance.keypoints, transform, size), size, sigma, limb_width
        )
        mask = inverse_warp_mask(baseline_segment(features, dilation), transform, image_size)
        score = transform.score if strategy == "pose" else 1.0
        return Prediction(instance.id, instance.image_id, mask, score)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(segment, instances))
    return [segment(instance) for instance in instances]


def expansion_sweep(
    dataset: Dataset,
    bank: TemplateBank | None,
    expands: Sequence[float] = DEFAULT_EXPANDS,
    overall: EvalBin = ALL,
    bins: Sequence[EvalBin] = (),
    size: int = DEFAULT_ALIGN_SIZE,
    sigma: float | None = None,
    limb_width: float | None = None,
    dilation: int = DEFAULT_DILATION,
    workers: int = 1,
) -> dict[str, ApReport]:
    """
    Box-versus-pose alignment grid with baseline segmentation.

    Rows: ground-truth boxes, keypoint boxes at each expand factor and, when a
    bank is given, pose templates.
    """
    gts = ground_truths(dataset)
    runs: list[tuple[str, Strategy, float]] = [("GT BBOX", "bbox", 0.0)]
    runs += [(f"GT KPT BBOX {round(e * 100)}%", "kpt-bbox", e) for e in expands]
    if bank is not None:
        runs.append(("GT KPT POSE", "pose", 0.0))
    reports: dict[str, ApReport] = {}
    for name, strategy, expand in runs:
        predictions = segment_dataset(
            dataset, bank, strategy, size, expand, sigma, limb_width, dilation, workers
        )
        reports[name] = average_precision(
            predictions, gts, overall=overall, bins=bins, workers=workers
        )
        logger.info(f"{name}: AP {reports[name].ap:.3f}")
    return reports
