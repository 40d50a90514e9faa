import logging
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import ValidationError

from .errors import (
    AnnotationFormatError,
    AnnotationReferenceError,
    ConfigError,
    InvalidKeypointError,
)
from .masks import decode_mask, pairwise_bbox_iou, pairwise_mask_iou
from .models import (
    HARD_MAX_IOU,
    MODERATE_MAX_IOU,
    BoolArray,
    CompressedRle,
    Dataset,
    ImageInfo,
    InstanceAnnotation,
    MaskSource,
    OcclusionRecord,
    OcclusionReport,
    PolygonMask,
    RejectedRecord,
    UncompressedRle,
    severity_for,
)
from .pose_model import pose_from_coco, pose_to_coco
from .utils import read_json

logger = logging.getLogger(__name__)

MaxIouMode = Literal["bbox", "mask"]
PERSON = "person"


def mask_source(segmentation: Any) -> MaskSource | None:
    if segmentation is None or segmentation == []:
        return None
    if isinstance(segmentation, list):
        return PolygonMask(polygons=segmentation)
    if isinstance(segmentation, dict):
        counts = segmentation.get("counts")
        size = segmentation.get("size")
        if isinstance(counts, list):
            return UncompressedRle(counts=counts, size=size)  # type: ignore[arg-type]
        if isinstance(counts, bytes):
            counts = counts.decode("ascii")
        return CompressedRle(counts=counts, size=size)  # type: ignore[arg-type]
    raise ValueError(f"unsupported segmentation of type {type(segmentation).__name__}")


def _mask_document(source: MaskSource | None) -> Any:
    if source is None:
        return []
    if isinstance(source, PolygonMask):
        return source.polygons
    return {"counts": source.counts, "size": list(source.size)}


def parse_annotations(document: dict[str, Any] | Path | str) -> Dataset:
    """
    Materialize the person instances of a COCO-format annotation document.

    Args:
        document: Parsed JSON or a path to it.

    Returns:
        Dataset of images and person instances. Records that fail validation
        are listed in `rejected` with their ids.
    """
    if not isinstance(document, dict):
        document = read_json(Path(document))
    assert isinstance(document, dict)
    for key in ("images", "annotations", "categories"):
        if not isinstance(document.get(key), list):
            raise AnnotationFormatError(f"annotation document lacks a '{key}' array", key=key)

    categories: list[dict[str, Any]] = document["categories"]
    category_ids = {category.get("id") for category in categories}
    person_ids = {
        category.get("id")
        for category in categories
        if PERSON in (category.get("name"), category.get("supercategory"))
    }
    rejected: list[RejectedRecord] = []

    images: dict[int, ImageInfo] = {}
    for raw in document["images"]:
        try:
            image = ImageInfo.model_validate(raw)
        except ValidationError as e:
            reason = f"image: {e.errors()[0]['msg']}"
            rejected.append(RejectedRecord(id=raw.get("id"), reason=reason))
            continue
        images[image.id] = image

    instances: list[InstanceAnnotation] = []
    outside_joints = 0
    for raw in document["annotations"]:
        record_id = raw.get("id")
        category_id = raw.get("category_id")
        if category_id not in category_ids:
            raise AnnotationReferenceError(
                f"annotation {record_id} references unknown category {category_id}",
                annotation_id=record_id,
                category_id=category_id,
            )
        if category_id not in person_ids:
            continue
        image = images.get(raw.get("image_id"))
        if image is None:
            raise AnnotationReferenceError(
                f"annotation {record_id} references absent image {raw.get('image_id')}",
                annotation_id=record_id,
                image_id=raw.get("image_id"),
            )
        try:
            keypoints = None
            if raw.get("keypoints"):
                keypoints, outside = pose_from_coco(raw["keypoints"], image.width, image.height)
                outside_joints += len(outside)
            instances.append(
                InstanceAnnotation(
                    id=record_id,
                    image_id=image.id,
                    category_id=category_id,
                    bbox=raw.get("bbox"),
                    keypoints=keypoints,
                    mask=mask_source(raw.get("segmentation")),
                    iscrowd=bool(raw.get("iscrowd", 0)),
                    area=raw.get("area", 0.0),
                )
            )
        except (ValidationError, ValueError, InvalidKeypointError) as e:
            rejected.append(RejectedRecord(id=record_id, reason=str(e).splitlines()[0]))

    if outside_joints:
        logger.warning(f"{outside_joints} labeled joints outside their image marked not in image")
    for record in rejected:
        logger.warning(f"Rejected record {record.id}: {record.reason}")
    logger.info(f"Parsed {len(images)} images and {len(instances)} person instances")
    return Dataset(images=images, instances=instances, categories=categories, rejected=rejected)


def merge_datasets(datasets: Iterable[Dataset]) -> Dataset:
    merged = Dataset()
    for dataset in datasets:
        merged.images.update(dataset.images)
        merged.instances.extend(dataset.instances)
        merged.rejected.extend(dataset.rejected)
        if not merged.categories:
            merged.categories = dataset.categories
    return merged


def to_coco(dataset: Dataset) -> dict[str, Any]:
    return {
        "images": [image.model_dump() for image in dataset.images.values()],
        "annotations": [
            {
                "id": instance.id,
                "image_id": instance.image_id,
                "category_id": instance.category_id,
                "bbox": list(instance.bbox),
                "area": instance.area,
                "iscrowd": int(instance.iscrowd),
                "segmentation": _mask_document(instance.mask),
                **(
                    {
                        "keypoints": pose_to_coco(instance.keypoints),
                        "num_keypoints": sum(kp.valid for kp in instance.keypoints.keypoints),
                    }
                    if instance.keypoints is not None
                    else {}
                ),
            }
            for instance in dataset.instances
        ],
        "categories": dataset.categories,
    }


def instance_mask(instance: InstanceAnnotation, image: ImageInfo) -> BoolArray:
    if instance.mask is None:
        return np.zeros((image.height, image.width), dtype=bool)
    return decode_mask(instance.mask, image.width, image.height)


def max_iou_records(
    instances: list[InstanceAnnotation],
    mode: MaxIouMode = "bbox",
    image: ImageInfo | None = None,
    include_crowd: bool = False,
) -> list[OcclusionRecord]:
    """
    MaxIoU of every person against the other persons of its image.

    Args:
        instances: Instances of a single image.
        mode: Compare boxes or decoded masks.
        image: Image the instances belong to, required in mask mode.
        include_crowd: Let crowd regions take part in the comparison.

    Returns:
        One record per considered instance, in ascending instance id order.
    """
    people = sorted(
        (i for i in instances if include_crowd or not i.iscrowd), key=lambda i: i.id
    )
    if not people:
        return []
    if mode == "mask":
        if image is None:
            raise ConfigError("mask-mode MaxIoU needs the image dimensions")
        ious = pairwise_mask_iou([instance_mask(i, image) for i in people])
    else:
        ious = pairwise_bbox_iou(np.array([i.bbox for i in people]))
    np.fill_diagonal(ious, -1.0)
    records: list[OcclusionRecord] = []
    for row, instance in enumerate(people):
        if len(people) == 1:
            max_iou, partner = 0.0, None
        else:
            column = int(np.argmax(ious[row]))  # first maximum is the lowest partner id
            max_iou = float(min(max(ious[row, column], 0.0), 1.0))
            partner = people[column].id
        records.append(
            OcclusionRecord(
                instance_id=instance.id,
                image_id=instance.image_id,
                max_iou=max_iou,
                partner_id=partner,
                severity=severity_for(max_iou),
            )
        )
    return records


def occlusion_records(
    dataset: Dataset,
    mode: MaxIouMode = "bbox",
    include_crowd: bool = False,
    workers: int = 1,
) -> dict[int, OcclusionRecord]:
    """MaxIoU records for the whole dataset, keyed by instance id."""
    groups = list(dataset.by_image().items())

    def compute(item: tuple[int, list[InstanceAnnotation]]) -> list[OcclusionRecord]:
        image_id, instances = item
        return max_iou_records(instances, mode, dataset.images.get(image_id), include_crowd)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(compute, groups))
    else:
        chunks = [compute(item) for item in groups]
    return {record.instance_id: record for chunk in chunks for record in chunk}


def occlusion_report(
    dataset: Dataset,
    records: dict[int, OcclusionRecord],
    mode: MaxIouMode = "bbox",
) -> OcclusionReport:
    values = np.array([record.max_iou for record in records.values()], dtype=float)
    return OcclusionReport(
        mode=mode,
        images=len(dataset.by_image()),
        persons=len(dataset.instances),
        evaluated=len(values),
        oc_050=int(np.count_nonzero(values > MODERATE_MAX_IOU)),
        oc_075=int(np.count_nonzero(values > HARD_MAX_IOU)),
        average_max_iou=float(values.mean()) if len(values) else 0.0,
    )


def _share(count: int, total: int) -> str:
    if total == 0 or count == 0:
        return "0%"
    share = count / total
    if share < 0.001:
        return "<0.1%"
    if share < 0.01:
        return "<1.0%"
    return f"{round(share * 100)}%"


def render_report_table(report: OcclusionReport, title: str = "") -> str:
    rows = [
        ("#images", f"{report.images}"),
        ("#persons", f"{report.persons}"),
        ("#persons (oc>0.5)", f"{report.oc_050} ({_share(report.oc_050, report.evaluated)})"),
        ("#persons (oc>0.75)", f"{report.oc_075} ({_share(report.oc_075, report.evaluated)})"),
        ("#average MaxIoU", f"{report.average_max_iou:.2f}"),
    ]
    if report.retained is not None:
        rows.append((f"#retained (MaxIoU>{report.threshold})", f"{report.retained}"))
    width = max(len(label) for label, _ in rows)
    lines = [title] if title else []
    lines += [f"{label:<{width}}  {value:>14}" for label, value in rows]
    return "\n".join(lines)


def filter_occluded(
    dataset: Dataset,
    threshold: float = MODERATE_MAX_IOU,
    mode: MaxIouMode = "bbox",
    include_crowd: bool = False,
    workers: int = 1,
) -> tuple[Dataset, OcclusionReport]:
    """Keep instances whose MaxIoU is strictly above threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    records = occlusion_records(dataset, mode, include_crowd, workers)
    kept = {record.instance_id for record in records.values() if record.max_iou > threshold}
    report = occlusion_report(dataset, records, mode).model_copy(
        update={"threshold": threshold, "retained": len(kept)}
    )
    logger.info(f"Kept {len(kept)} of {len(dataset.instances)} instances with MaxIoU > {threshold}")
    return dataset.subset(kept), report


def split_dataset(
    dataset: Dataset, seed: int = 0, val_fraction: float = 0.5
) -> tuple[Dataset, Dataset]:
    """Deterministic image-level split; instances follow their image."""
    if not 0.0 <= val_fraction <= 1.0:
        raise ConfigError(f"val_fraction must lie in [0, 1], got {val_fraction}")
    image_ids = np.array(sorted(dataset.images), dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(image_ids))
    n_val = int(round(val_fraction * len(image_ids)))
    val_ids = {int(i) for i in image_ids[order[:n_val]]}
    test_ids = {int(i) for i in image_ids[order[n_val:]]}
    return dataset.subset_images(val_ids), dataset.subset_images(test_ids)


def split_from_manifest(
    dataset: Dataset, manifest: dict[str, list[int]]
) -> tuple[Dataset, Dataset]:
    """Replay a published {val: [...], test: [...]} image-id manifest."""
    for key in ("val", "test"):
        if not isinstance(manifest.get(key), list):
            raise AnnotationFormatError(f"split manifest lacks a '{key}' list")
    val_ids, test_ids = set(manifest["val"]), set(manifest["test"])
    missing = sorted((val_ids | test_ids) - set(dataset.images))
    if missing:
        raise AnnotationReferenceError(
            f"split manifest names {len(missing)} unknown images, first {missing[0]}",
            image_ids=missing[:10],
        )
    if val_ids & test_ids:
        raise AnnotationFormatError("split manifest lists images in both val and test")
    return dataset.subset_images(val_ids), dataset.subset_images(test_ids)
