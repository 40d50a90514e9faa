import itertools
import json
import random
from pathlib import Path

import numpy as np
import pytest

from .core.dataset import max_iou_records
from .core.errors import (
    AnnotationFormatError,
    AnnotationReferenceError,
    ConfigError,
    InvalidKeypointError,
    UndefinedApError,
)
from .core.evaluation import (
    IOU_THRESHOLDS,
    average_precision,
    keypoints_to_bbox,
    load_predictions,
    match_instances,
    occlusion_bins,
    prediction_records,
    render_ap_table,
    size_bins,
)
from .core.masks import mask_iou
from .core.models import (
    NUM_KEYPOINTS,
    ApReport,
    BoolArray,
    CoordinateSpace,
    Dataset,
    EvalBin,
    GroundTruth,
    ImageInfo,
    InstanceAnnotation,
    Pose,
    Prediction,
)

SHAPE = (40, 40)


def block(x: int, y: int, w: int, h: int, shape: tuple[int, int] = SHAPE) -> BoolArray:
    mask = np.zeros(shape, dtype=bool)
    mask[y : y + h, x : x + w] = True
    return mask


def test_identical_predictions_score_one() -> None:
    gts = [GroundTruth(i, 1, block(10 * i, 0, 8, 8)) for i in range(3)]
    preds = [Prediction(10 + i, 1, gt.mask, 0.9) for i, gt in enumerate(gts)]
    report = average_precision(preds, gts)
    assert report.ap == pytest.approx(1.0)
    assert report.per_threshold["all"] == pytest.approx([1.0] * len(IOU_THRESHOLDS))
    assert report.counts["all"].tp == 3 and report.counts["all"].fn == 0


def test_no_predictions_score_zero() -> None:
    gts = [GroundTruth(1, 1, block(0, 0, 8, 8))]
    assert average_precision([], gts).ap == 0.0


def test_hand_computed_ap() -> None:
    # TP, FP, TP over three gts: precision 1 up to recall 1/3, 2/3 up to 2/3, then nothing.
    gts = [GroundTruth(i + 1, 1, block(0, 10 * i, 8, 8)) for i in range(3)]
    preds = [
        Prediction(1, 1, gts[0].mask, 0.9),
        Prediction(2, 1, block(30, 30, 5, 5), 0.8),
        Prediction(3, 1, gts[1].mask, 0.7),
    ]
    report = average_precision(preds, gts)
    assert report.ap == pytest.approx(56 / 101)
    curve = report.curves[0]
    assert curve.recall == pytest.approx([1 / 3, 1 / 3, 2 / 3])
    assert curve.precision == pytest.approx([1.0, 0.5, 2 / 3])


def test_duplicate_prediction_is_a_false_positive() -> None:
    gt = GroundTruth(1, 1, block(0, 0, 10, 10))
    preds = [Prediction(1, 1, gt.mask, 0.5), Prediction(2, 1, block(0, 0, 10, 9), 0.9)]
    matching = match_instances(preds, [gt])
    assert matching.matches == {2: 1}
    assert matching.false_positives == [1]
    assert matching.tp == 1 and matching.fp == 1 and matching.fn == 0


def test_threshold_cutoff() -> None:
    # IoU 80 / 120: a hit up to 0.65, a miss from 0.7.
    gts = [GroundTruth(1, 1, block(0, 0, 10, 10))]
    preds = [Prediction(1, 1, block(2, 0, 10, 10), 1.0)]
    report = average_precision(preds, gts)
    assert report.per_threshold["all"] == pytest.approx([1.0] * 4 + [0.0] * 6)
    assert report.ap == pytest.approx(0.4)


def test_equal_iou_goes_to_lowest_gt_id() -> None:
    gts = [GroundTruth(7, 1, block(0, 0, 10, 10)), GroundTruth(3, 1, block(10, 0, 10, 10))]
    preds = [Prediction(1, 1, block(5, 0, 10, 10), 1.0)]
    assert match_instances(preds, gts, iou_threshold=0.3).matches == {1: 3}


def brute_force_matches(
    preds: list[Prediction], gts: list[GroundTruth], threshold: float
) -> dict[int, int]:
    matches: dict[int, int] = {}
    taken: set[int] = set()
    for pred in sorted(preds, key=lambda p: (-p.score, p.id)):
        candidates = [
            (mask_iou(pred.mask, gt.mask), -gt.id, gt.id)
            for gt in gts
            if gt.image_id == pred.image_id and gt.id not in taken
        ]
        candidates = [c for c in candidates if c[0] >= threshold]
        if candidates:
            _, _, gt_id = max(candidates)
            taken.add(gt_id)
            matches[pred.id] = gt_id
    return matches


def random_scene(rng: np.random.Generator) -> tuple[list[Prediction], list[GroundTruth]]:
    def box() -> BoolArray:
        x, y = (int(v) for v in rng.integers(0, 10, 2))
        w, h = (int(v) for v in rng.integers(2, 6, 2))
        return block(x, y, w, h, (16, 16))

    gts: list[GroundTruth] = []
    preds: list[Prediction] = []
    for image_id in range(1, int(rng.integers(2, 4))):
        for _ in range(rng.integers(0, 5)):
            gts.append(GroundTruth(len(gts) + 1, image_id, box()))
        for _ in range(rng.integers(0, 6)):
            preds.append(Prediction(len(preds) + 1, image_id, box(), float(rng.integers(0, 3)) / 2))
    return preds, gts


def test_scene_ids_are_unique() -> None:
    rng = np.random.default_rng(3)
    for _ in range(20):
        preds, gts = random_scene(rng)
        assert len({p.id for p in preds}) == len(preds)
        assert len({g.id for g in gts}) == len(gts)


def test_matching_agrees_with_brute_force() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        preds, gts = random_scene(rng)
        threshold = float(rng.choice([0.1, 0.3, 0.5]))
        matching = match_instances(preds, gts, threshold)
        assert matching.matches == brute_force_matches(preds, gts, threshold)
        assert matching.tp + matching.fp == len(preds)
        assert matching.tp + matching.fn == len(gts)


def test_ap_is_invariant_to_input_order() -> None:
    rng = np.random.default_rng(1)
    shuffle = random.Random(2)
    for _ in range(30):
        preds, gts = random_scene(rng)
        if not gts:
            continue
        report = average_precision(preds, gts)
        shuffle.shuffle(preds)
        shuffle.shuffle(gts)
        assert average_precision(preds, gts).model_dump() == report.model_dump()


def brute_force_ap(preds: list[Prediction], gts: list[GroundTruth], threshold: float) -> float:
    matches = brute_force_matches(preds, gts, threshold)
    tp = fp = 0
    points: list[tuple[float, float]] = []
    for pred in sorted(preds, key=lambda p: (-p.score, p.id)):
        if pred.id in matches:
            tp += 1
        else:
            fp += 1
        points.append((tp / len(gts), tp / (tp + fp)))
    grid = np.linspace(0.0, 1.0, 101)
    return float(
        np.mean([max((p for r, p in points if r >= level), default=0.0) for level in grid])
    )


def test_ap_agrees_with_brute_force() -> None:
    rng = np.random.default_rng(4)
    for _ in range(150):
        preds, gts = random_scene(rng)
        if not gts:
            continue
        report = average_precision(preds, gts)
        expected = [brute_force_ap(preds, gts, t) for t in IOU_THRESHOLDS]
        assert report.per_threshold["all"] == pytest.approx(expected)
        assert report.ap == pytest.approx(np.mean(expected))
        values = [v for v in report.per_threshold["all"] if v is not None]
        assert all(a >= b - 1e-12 for a, b in itertools.pairwise(values))


def test_crowd_regions_absorb_predictions() -> None:
    crowd = GroundTruth(1, 1, block(0, 0, 20, 20), iscrowd=True)
    person = GroundTruth(2, 1, block(25, 25, 10, 10))
    preds = [Prediction(1, 1, block(2, 2, 5, 5), 0.9), Prediction(2, 1, block(4, 4, 5, 5), 0.8)]
    matching = match_instances(preds, [crowd, person])
    assert matching.ignored_predictions == [1, 2]
    assert matching.fp == 0 and matching.false_negatives == [2]
    with pytest.raises(UndefinedApError):
        average_precision(preds, [crowd])


def test_size_bins() -> None:
    overall, (medium, large) = size_bins()
    assert medium.contains_area(32**2) and medium.contains_area(96**2)
    assert not large.contains_area(96**2) and large.contains_area(96**2 + 1)
    assert not overall.contains_area(32**2 - 1)
    assert size_bins(exclude_small=False)[0].area_range is None


def test_bin_counts_partition_the_gts() -> None:
    shape = (200, 200)
    gts = [
        GroundTruth(1, 1, block(0, 0, 40, 40, shape)),
        GroundTruth(2, 1, block(50, 50, 100, 100, shape)),
        GroundTruth(3, 1, block(0, 160, 35, 35, shape)),
        GroundTruth(4, 1, block(160, 0, 5, 5, shape)),
    ]
    preds = [
        Prediction(1, 1, gts[0].mask, 0.9),
        Prediction(2, 1, gts[1].mask, 0.8),
        Prediction(3, 1, block(190, 190, 5, 5, shape), 0.7),
    ]
    overall, bins = size_bins()
    report = average_precision(preds, gts, bins=bins, overall=overall)
    assert report.counts["all"].gts == 3
    assert (report.counts["medium"].gts, report.counts["large"].gts) == (2, 1)
    for counts in report.counts.values():
        assert counts.tp + counts.fn == counts.gts
    assert report.bins["large"] == pytest.approx(1.0)
    # The small stray prediction is ignored by every bin; medium recall stops at 1/2.
    assert report.bins["medium"] == pytest.approx(51 / 101)


def test_empty_bin_reports_none() -> None:
    gts = [GroundTruth(1, 1, block(0, 0, 5, 5))]
    preds = [Prediction(1, 1, gts[0].mask, 1.0)]
    report = average_precision(preds, gts, bins=[EvalBin(name="hard", gt_ids=frozenset())])
    assert report.bins["hard"] is None
    assert report.ap == pytest.approx(1.0)


def test_occlusion_bins() -> None:
    people = [
        InstanceAnnotation(id=1, image_id=1, bbox=(0, 0, 10, 10)),
        InstanceAnnotation(id=2, image_id=1, bbox=(0, 0, 10, 10)),
        InstanceAnnotation(id=3, image_id=1, bbox=(0, 0, 10, 6)),
        InstanceAnnotation(id=4, image_id=1, bbox=(50, 50, 10, 10)),
    ]
    records = {r.instance_id: r for r in max_iou_records(people)}
    overall, (moderate, hard) = occlusion_bins(records)
    assert overall.gt_ids is None
    assert hard.gt_ids == {1, 2}
    assert moderate.gt_ids == {3}


def test_unmatched_predictions_count_in_occlusion_bins() -> None:
    gts = [GroundTruth(1, 1, block(0, 0, 10, 10)), GroundTruth(2, 1, block(20, 20, 10, 10))]
    preds = [Prediction(1, 1, gts[0].mask, 0.9), Prediction(2, 1, block(30, 0, 5, 5), 0.95)]
    hard = EvalBin(name="hard", gt_ids=frozenset({1}))
    matching = match_instances(preds, gts, bin=hard)
    assert matching.matches == {1: 1}
    assert matching.false_positives == [2]


def test_load_predictions(tmp_path: Path) -> None:
    dataset = Dataset(images={1: ImageInfo(id=1, width=40, height=40)})
    preds = [Prediction(5, 1, block(0, 0, 10, 10), 0.7), Prediction(6, 1, block(5, 5, 3, 3), 0.2)]
    path = tmp_path / "predictions.json"
    path.write_text(json.dumps({"results": prediction_records(preds)}))
    loaded = load_predictions(path, dataset)
    assert [(p.id, p.score) for p in loaded] == [(5, 0.7), (6, 0.2)]
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(loaded, preds))

    bare = [{"image_id": 1, "score": 1.0, "segmentation": [[0, 0, 4, 0, 4, 4, 0, 4]]}]
    path.write_text(json.dumps(bare))
    [only] = load_predictions(path, dataset)
    assert only.id == 1 and only.area == 16

    path.write_text(json.dumps([{"image_id": 9, "score": 1.0, "segmentation": []}]))
    with pytest.raises(AnnotationReferenceError):
        load_predictions(path, dataset)
    path.write_text(json.dumps([{"image_id": 1, "segmentation": []}]))
    with pytest.raises(AnnotationFormatError):
        load_predictions(path, dataset)
    path.write_text(json.dumps({"predictions": []}))
    with pytest.raises(AnnotationFormatError):
        load_predictions(path, dataset)
    repeated = [{"id": 4, "image_id": 1, "score": s, "segmentation": []} for s in (0.9, 0.1)]
    path.write_text(json.dumps(repeated))
    with pytest.raises(AnnotationFormatError):
        load_predictions(path, dataset)


def pose_with(points: list[tuple[float, float]]) -> Pose:
    array = np.tile([0.5, 0.5, 0.0], (NUM_KEYPOINTS, 1))
    for index, (x, y) in enumerate(points):
        array[index] = [x, y, 2]
    return Pose.from_array(array, CoordinateSpace.pixel(100, 100))


def test_keypoints_to_bbox() -> None:
    pose = pose_with([(10, 10), (30, 50), (20, 30)])
    assert keypoints_to_bbox(pose) == (10, 10, 20, 40)
    assert keypoints_to_bbox(pose, 1.0) == (0, -10, 40, 80)
    assert keypoints_to_bbox(pose, 1.0, image_size=(35, 60)) == (0, 0, 35, 60)
    with pytest.raises(ConfigError):
        keypoints_to_bbox(pose, -0.1)
    with pytest.raises(InvalidKeypointError):
        keypoints_to_bbox(Pose.empty(CoordinateSpace.pixel(100, 100)))


def test_render_ap_table() -> None:
    reports = {
        "GT BBOX": ApReport(ap=0.5, bins={"medium": 0.25, "large": None}, thresholds=[0.5]),
        "GT KPT POSE": ApReport(ap=0.75, bins={"medium": 0.5, "large": 1.0}, thresholds=[0.5]),
    }
    lines = render_ap_table(reports).splitlines()
    assert lines[0].split() == ["AP", "AP_M", "AP_L"]
    assert lines[1].split()[-3:] == ["0.500", "0.250", "-"]
    assert lines[2].startswith("GT KPT POSE")
    assert render_ap_table({}) == ""


def test_thresholds_must_not_be_empty() -> None:
    gts = [GroundTruth(1, 1, block(0, 0, 5, 5))]
    with pytest.raises(ConfigError):
        average_precision([], gts, thresholds=[])
    assert average_precision([], gts, thresholds=[0.5]).ap == 0.0
