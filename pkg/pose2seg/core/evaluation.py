import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from .dataset import instance_mask, mask_source
from .errors import (
    AnnotationFormatError,
    AnnotationReferenceError,
    ConfigError,
    InvalidKeypointError,
    UndefinedApError,
)
from .masks import decode_mask, encode_mask
from .models import (
    ApReport,
    BBox,
    BinCounts,
    Dataset,
    EvalBin,
    GroundTruth,
    Matching,
    OcclusionRecord,
    Pose,
    PrCurve,
    Prediction,
    Severity,
)
from .utils import read_json

logger = logging.getLogger(__name__)

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
SMALL_AREA = 32.0**2
MEDIUM_AREA = 96.0**2

ALL = EvalBin(name="all")


def ground_truths(dataset: Dataset) -> list[GroundTruth]:
    """Decoded ground-truth masks. Annotated areas win over pixel counts for binning."""
    gts: list[GroundTruth] = []
    for instance in dataset.instances:
        image = dataset.images[instance.image_id]
        mask = instance_mask(instance, image)
        area = instance.area if instance.area > 0 else float(mask.sum())
        gts.append(GroundTruth(instance.id, instance.image_id, mask, area, instance.iscrowd))
    return gts


def load_predictions(path: Path, dataset: Dataset) -> list[Prediction]:
    """
    Read COCO results JSON: a list of {image_id, segmentation, score} records,
    or an object holding them under "results".

    Predictions without an id are numbered by position, starting at 1. Ids must
    be unique across the file.
    """
    document = read_json(path)
    records = document.get("results") if isinstance(document, dict) else document
    if not isinstance(records, list):
        raise AnnotationFormatError(f"{path} holds no list of prediction records")
    predictions: list[Prediction] = []
    seen: set[int] = set()
    for position, record in enumerate(records, start=1):
        image = dataset.images.get(record.get("image_id"))
        if image is None:
            raise AnnotationReferenceError(
                f"prediction {position} references absent image {record.get('image_id')}",
                image_id=record.get("image_id"),
            )
        try:
            score = float(record["score"])
            source = mask_source(record["segmentation"])
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise AnnotationFormatError(f"prediction {position} is malformed: {e}") from e
        if not math.isfinite(score):
            raise AnnotationFormatError(f"prediction {position} has a non-finite score")
        mask = (
            np.zeros((image.height, image.width), dtype=bool)
            if source is None
            else decode_mask(source, image.width, image.height)
        )
        prediction_id = int(record.get("id", position))
        if prediction_id in seen:
            raise AnnotationFormatError(
                f"prediction {position} repeats id {prediction_id}", prediction_id=prediction_id
            )
        seen.add(prediction_id)
        predictions.append(Prediction(prediction_id, image.id, mask, score))
    logger.info(f"Loaded {len(predictions)} predictions from {path}")
    return predictions


def prediction_records(predictions: Sequence[Prediction]) -> list[dict[str, Any]]:
    """COCO results records with compressed RLE segmentations."""
    records: list[dict[str, Any]] = []
    for p in predictions:
        rle = encode_mask(p.mask, compressed=True)
        records.append(
            {
                "id": p.id,
                "image_id": p.image_id,
                "category_id": 1,
                "score": p.score,
                "segmentation": {"counts": rle.counts, "size": list(rle.size)},
            }
        )
    return records


def _prediction_order(preds: Sequence[Prediction]) -> list[Prediction]:
    return sorted(preds, key=lambda p: (-p.score, p.id))


def _iou_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruth]) -> NDArray[np.float64]:
    """Mask IoU of every prediction against every gt; crowd gts use inter / area_pred."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([pred.mask.ravel() for pred in preds]).astype(np.float64)
    g = np.stack([gt.mask.ravel() for gt in gts]).astype(np.float64)
    inter = p @ g.T
    area_p = p.sum(axis=1)[:, None]
    union = area_p + g.sum(axis=1)[None, :] - inter
    crowd = np.array([gt.iscrowd for gt in gts])
    union = np.where(crowd[None, :], area_p, union)
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass(frozen=True, eq=False)
class _ImageScene:
    preds: list[Prediction]  # in matching order
    gts: list[GroundTruth]  # ascending id
    ious: NDArray[np.float64]


def _scenes(
    preds: Sequence[Prediction], gts: Sequence[GroundTruth], workers: int = 1
) -> list[_ImageScene]:
    by_image: dict[int, tuple[list[Prediction], list[GroundTruth]]] = {}
    for pred in preds:
        by_image.setdefault(pred.image_id, ([], []))[0].append(pred)
    for gt in gts:
        by_image.setdefault(gt.image_id, ([], []))[1].append(gt)

    def build(item: tuple[list[Prediction], list[GroundTruth]]) -> _ImageScene:
        image_preds = _prediction_order(item[0])
        image_gts = sorted(item[1], key=lambda g: g.id)
        return _ImageScene(image_preds, image_gts, _iou_matrix(image_preds, image_gts))

    groups = [by_image[image_id] for image_id in sorted(by_image)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, groups))
    return [build(group) for group in groups]


def _match_scene(
    scene: _ImageScene, iou_threshold: float, bin: EvalBin, matching: Matching
) -> None:
    ignored = [gt.iscrowd or not bin.contains(gt) for gt in scene.gts]
    # Non-ignored gts are tried first.
    order = sorted(range(len(scene.gts)), key=lambda g: (ignored[g], scene.gts[g].id))
    taken = [False] * len(scene.gts)
    for d, pred in enumerate(scene.preds):
        best, best_iou = -1, iou_threshold
        for g in order:
            gt = scene.gts[g]
            if taken[g] and not gt.iscrowd:
                continue
            if best > -1 and not ignored[best] and ignored[g]:
                break
            iou = scene.ious[d, g]
            if iou < best_iou or (best > -1 and iou == best_iou):
                continue
            best, best_iou = g, iou
        if best == -1:
            # Unmatched predictions only count against bins they could belong to.
            if bin.area_range is not None and not bin.contains_area(pred.area):
                matching.ignored_predictions.append(pred.id)
            else:
                matching.false_positives.append(pred.id)
            continue
        taken[best] = True
        if ignored[best]:
            matching.ignored_predictions.append(pred.id)
        else:
            matching.matches[pred.id] = scene.gts[best].id
    matching.false_negatives.extend(
        gt.id for g, gt in enumerate(scene.gts) if not ignored[g] and not taken[g]
    )


def match_instances(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    bin: EvalBin = ALL,
) -> Matching:
    """
    Greedy one-to-one matching within each image.

    Predictions are visited by descending score (ties by id) and take the
    unmatched gt of highest mask IoU at or above the threshold, lowest gt id
    on equal IoU. Gts outside `bin` (and crowd regions) are ignored: a
    prediction landing on one is neither a true nor a false positive.
    """
    matching = Matching()
    for scene in _scenes(preds, gts):
        _match_scene(scene, iou_threshold, bin, matching)
    return matching


def _interpolated_ap(
    scored: list[tuple[float, int, bool]], positives: int
) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """101-point interpolated AP from (score, id, is_tp) detections."""
    if not scored:
        return 0.0, np.zeros(0), np.zeros(0)
    scored.sort(key=lambda item: (-item[0], item[1]))
    hits = np.array([tp for _, _, tp in scored], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / positives
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(
        indices < len(envelope), envelope[np.minimum(indices, len(envelope) - 1)], 0.0
    )
    return float(sampled.mean()), recall, precision


def average_precision(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruth],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    bins: Sequence[EvalBin] = (),
    overall: EvalBin = ALL,
    workers: int = 1,
) -> ApReport:
    """
    COCO-style mask AP.

    Args:
        preds: Predictions over any number of images.
        gts: Ground truths of the same images.
        thresholds: IoU thresholds averaged over.
        bins: Extra bins reported next to the overall AP.
        overall: Bin of the headline AP (all gts by default).
        workers: Threads used to build per-image IoU matrices.

    Returns:
        Report with the headline AP, per-bin AP (None for a bin without gts),
        per-threshold values, overall PR curves and counts at the first threshold.
    """
    if not thresholds:
        raise ConfigError("at least one IoU threshold is needed")
    scenes = _scenes(preds, gts, workers)
    scores = {p.id: p.score for p in preds}
    report_bins = [overall, *bins]
    per_threshold: dict[str, list[float | None]] = {}
    counts: dict[str, BinCounts] = {}
    curves: list[PrCurve] = []
    for bin in report_bins:
        positives = sum(1 for gt in gts if not gt.iscrowd and bin.contains(gt))
        values: list[float | None] = []
        for t_index, threshold in enumerate(thresholds):
            matching = Matching()
            for scene in scenes:
                _match_scene(scene, threshold, bin, matching)
            if t_index == 0:
                counts[bin.name] = BinCounts(gts=positives, tp=matching.tp, fn=matching.fn)
            if positives == 0:
                values.append(None)
                continue
            scored = [(scores[i], i, True) for i in matching.matches] + [
                (scores[i], i, False) for i in matching.false_positives
            ]
            ap, recall, precision = _interpolated_ap(scored, positives)
            values.append(ap)
            if bin is overall:
                curves.append(
                    PrCurve(
                        iou_threshold=threshold,
                        recall=recall.tolist(),
                        precision=precision.tolist(),
                    )
                )
        per_threshold[bin.name] = values

    def mean(values: list[float | None]) -> float | None:
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else None

    headline = mean(per_threshold[overall.name])
    if headline is None:
        raise UndefinedApError("no ground truth instances to evaluate against")
    return ApReport(
        ap=headline,
        bins={bin.name: mean(per_threshold[bin.name]) for bin in bins},
        per_threshold=per_threshold,
        thresholds=list(thresholds),
        curves=curves,
        counts=counts,
    )


def size_bins(exclude_small: bool = True) -> tuple[EvalBin, list[EvalBin]]:
    """Overall bin plus Medium [32^2, 96^2] and Large (> 96^2) area bins."""
    overall = EvalBin(name="all", area_range=(SMALL_AREA, math.inf)) if exclude_small else ALL
    return overall, [
        EvalBin(name="medium", area_range=(SMALL_AREA, MEDIUM_AREA)),
        EvalBin(name="large", area_range=(float(np.nextafter(MEDIUM_AREA, math.inf)), math.inf)),
    ]


def occlusion_bins(records: dict[int, OcclusionRecord]) -> tuple[EvalBin, list[EvalBin]]:
    """Overall bin plus moderate and hard severity bins keyed on gt ids."""
    return ALL, [
        EvalBin(
            name=severity.value,
            gt_ids=frozenset(i for i, r in records.items() if r.severity == severity),
        )
        for severity in (Severity.MODERATE, Severity.HARD)
    ]


def keypoints_to_bbox(
    pose: Pose, expand: float = 0.0, image_size: tuple[float, float] | None = None
) -> BBox:
    """
    Tight box around the valid keypoints, grown by `expand` and clamped.

    Width and height each grow by the factor `expand` about the box center
    (0.3 makes the box 30% wider and taller).
    """
    if expand < 0:
        raise ConfigError(f"expand must be non-negative, got {expand}")
    array = pose.to_array()
    valid = array[array[:, 2] > 0, :2]
    if len(valid) == 0:
        raise InvalidKeypointError("a box needs at least one valid keypoint")
    x0, y0 = valid.min(axis=0)
    x1, y1 = valid.max(axis=0)
    grow_x = (x1 - x0) * expand / 2
    grow_y = (y1 - y0) * expand / 2
    x0, x1, y0, y1 = x0 - grow_x, x1 + grow_x, y0 - grow_y, y1 + grow_y
    if image_size is not None:
        width, height = image_size
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, width), min(y1, height)
    return float(x0), float(y0), float(x1 - x0), float(y1 - y0)


_COLUMN_LABELS = {"medium": "AP_M", "moderate": "AP_M", "large": "AP_L", "hard": "AP_H"}


def render_ap_table(reports: dict[str, ApReport]) -> str:
    """One row per named report, columns AP then its bins."""
    if not reports:
        return ""
    bin_names = list(next(iter(reports.values())).bins)
    header = ["", "AP", *(_COLUMN_LABELS.get(name, f"AP_{name}") for name in bin_names)]
    rows = [
        [
            name,
            *(
                "-" if value is None else f"{value:.3f}"
                for value in [report.ap, *(report.bins.get(b) for b in bin_names)]
            ),
        ]
        for name, report in reports.items()
    ]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = [
        "  ".join(
            cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(row)
        )
        for row in [header, *rows]
    ]
    return "\n".join(lines)
