import json
from pathlib import Path
from typing import Any

import numpy as np
import pytest
from PIL import Image

from .__main__ import run
from .core.errors import ConfigError
from .core.masks import rle_counts
from .pipeline import build_config
from .test_baseline import STICK_FIGURE, silhouette

SIZE = 400
CATEGORIES = [{"id": 1, "name": "person", "supercategory": "person"}]


def figure_annotation(id: int, image_id: int, offset: float, rng: np.random.Generator) -> dict[str, Any]:
    body = silhouette(2.0, offset, SIZE)
    rows, cols = np.nonzero(body)
    joints = np.array(STICK_FIGURE, dtype=float) * 2.0 + offset + rng.normal(0, 1.5, (17, 2))
    return {
        "id": id,
        "image_id": image_id,
        "category_id": 1,
        "bbox": [float(cols.min()), float(rows.min()), float(np.ptp(cols) + 1), float(np.ptp(rows) + 1)],
        "area": float(body.sum()),
        "iscrowd": 0,
        "segmentation": {"counts": rle_counts(body), "size": [SIZE, SIZE]},
        "keypoints": np.column_stack([joints, np.full(17, 2)]).ravel().tolist(),
        "num_keypoints": 17,
    }


@pytest.fixture(scope="session")
def workspace(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Three images with two stick-figure people each, plus the images themselves."""
    root = tmp_path_factory.mktemp("pose2seg")
    rng = np.random.default_rng(0)
    images: list[dict[str, Any]] = []
    annotations: list[dict[str, Any]] = []
    for image_id in (1, 2, 3):
        images.append({"id": image_id, "width": SIZE, "height": SIZE, "file_name": f"{image_id}.png"})
        for person, offset in enumerate((36.0, 216.0)):
            annotations.append(figure_annotation(10 * image_id + person, image_id, offset, rng))
        pixels = rng.integers(0, 256, (SIZE, SIZE, 3), dtype=np.uint8)
        (root / "images").mkdir(exist_ok=True)
        Image.fromarray(pixels).save(root / "images" / f"{image_id}.png")
    document = {"images": images, "annotations": annotations, "categories": CATEGORIES}
    (root / "train.json").write_text(json.dumps(document))

    boxes = {
        "images": [{"id": 1, "width": 100, "height": 100}],
        "annotations": [
            {"id": i, "image_id": 1, "category_id": 1, "bbox": [10, 10, 30, 30], "iscrowd": 0}
            for i in (1, 2)
        ],
        "categories": CATEGORIES,
    }
    (root / "boxes.json").write_text(json.dumps(boxes))
    return root


def without_metadata(path: Path) -> dict[str, Any]:
    document: dict[str, Any] = json.loads(path.read_text())
    document.pop("metadata")
    return document


def last_json_line(text: str) -> dict[str, Any]:
    result: dict[str, Any] = json.loads(text.strip().splitlines()[-1])
    return result


def test_cluster_is_deterministic(workspace: Path) -> None:
    train = str(workspace / "train.json")
    for name in ("bank_a.json", "bank_b.json"):
        args = ["cluster", "--input", train, "--output", str(workspace / name)]
        assert run([*args, "--k", "3", "--seed", "7"]) == 0
    first = without_metadata(workspace / "bank_a.json")
    assert first == without_metadata(workspace / "bank_b.json")
    assert first["K"] == 3 and first["schema_version"] == 1


def test_stats_on_identical_boxes(workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert run(["stats", "--input", str(workspace / "boxes.json")]) == 0
    report = json.loads(capsys.readouterr().out)["report"]
    assert report["average_max_iou"] == 1.0
    assert report["oc_075"] == 2

    assert run(["stats", "--input", str(workspace / "boxes.json"), "--format", "table"]) == 0
    assert "#average MaxIoU" in capsys.readouterr().out


def test_evaluate_ground_truth_scores_one(
    workspace: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    document = json.loads((workspace / "train.json").read_text())
    results = [
        {"image_id": a["image_id"], "score": 1.0, "segmentation": a["segmentation"]}
        for a in document["annotations"]
    ]
    predictions = workspace / "perfect.json"
    predictions.write_text(json.dumps(results))
    args = ["evaluate", "--input", str(workspace / "train.json"), "--predictions", str(predictions)]
    assert run(args) == 0
    assert json.loads(capsys.readouterr().out)["report"]["ap"] == pytest.approx(1.0)
    assert run([*args, "--bins", "size", "--format", "table"]) == 0
    assert "AP_M" in capsys.readouterr().out


def test_segment_then_evaluate(workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
    train = str(workspace / "train.json")
    predictions = workspace / "segmented.json"
    assert run(["segment", "--input", train, "--strategy", "bbox", "--output", str(predictions)]) == 0
    assert len(json.loads(predictions.read_text())["results"]) == 6
    capsys.readouterr()
    assert run(["evaluate", "--input", train, "--predictions", str(predictions)]) == 0
    assert json.loads(capsys.readouterr().out)["report"]["ap"] > 0

    bank = workspace / "bank_segment.json"
    assert run(["cluster", "--input", train, "--output", str(bank), "--k", "2"]) == 0
    args = ["segment", "--input", train, "--templates", str(bank), "--output", str(predictions)]
    assert run(args) == 0
    assert all(0 < r["score"] <= 1 for r in json.loads(predictions.read_text())["results"])


def test_align_and_skeleton(workspace: Path) -> None:
    train = str(workspace / "train.json")
    bank = workspace / "bank_align.json"
    assert run(["cluster", "--input", train, "--output", str(bank), "--k", "1"]) == 0

    crops = workspace / "crops"
    args = ["align", "--input", train, "--templates", str(bank), "--image-dir"]
    assert run([*args, str(workspace / "images"), "--output", str(crops), "--size", "32"]) == 0
    assert len(list(crops.glob("*.png"))) == 6
    with Image.open(crops / "1_10.png") as crop:
        assert crop.size == (32, 32)
    sidecar = json.loads((crops / "1_10.json").read_text())
    assert len(sidecar["matrix"]) == 2 and sidecar["template_index"] == 0

    tensors = workspace / "tensors"
    assert run(["skeleton", "--input", train, "--output", str(tensors), "--previews"]) == 0
    assert len(list(tensors.glob("*.p2sf"))) == 6
    assert len(list((tensors / "10_previews").glob("*.png"))) == 36


def test_split_and_filter(workspace: Path) -> None:
    train = str(workspace / "train.json")
    out = workspace / "split"
    assert run(["split", "--input", train, "--output", str(out), "--val-fraction", "0.34"]) == 0
    val = json.loads((out / "val.json").read_text())
    test = json.loads((out / "test.json").read_text())
    assert len(val["images"]) == 1 and len(test["images"]) == 2
    assert len(val["annotations"]) + len(test["annotations"]) == 6

    manifest = workspace / "manifest.json"
    manifest.write_text(json.dumps({"val": [1], "test": [2, 3]}))
    assert run(["split", "--input", train, "--output", str(out), "--manifest", str(manifest)]) == 0
    assert [i["id"] for i in json.loads((out / "val.json").read_text())["images"]] == [1]

    subset = workspace / "occluded.json"
    assert run(["filter", "--input", str(workspace / "boxes.json"), "--output", str(subset)]) == 0
    assert len(json.loads(subset.read_text())["annotations"]) == 2


def test_rf_table(capsys: pytest.CaptureFixture[str]) -> None:
    assert run(["rf", "--format", "table"]) == 0
    out = capsys.readouterr().out
    assert "49.0" in out and "89.0" in out
    assert run(["rf", "--units", "10"]) == 0
    assert json.loads(capsys.readouterr().out)["receptive_field"] == {"10": 49.0}


def test_usage_errors(workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert run(["frobnicate"]) == 2
    assert last_json_line(capsys.readouterr().err)["error"] == "config"

    assert run(["stats", "--input", str(workspace / "missing.json")]) == 3
    assert last_json_line(capsys.readouterr().err)["error"] == "unreadable_input"

    assert run(["cluster", "--input", str(workspace / "train.json")]) == 2
    assert run(["cluster", "--help"]) == 0


def test_config_file_and_flags(workspace: Path) -> None:
    config = workspace / "config.json"
    config.write_text(json.dumps({"k": 5, "seed": 3, "input": [str(workspace / "train.json")]}))
    merged = build_config("cluster", {"k": 2, "output": workspace / "out.json"}, config)
    assert (merged.k, merged.seed) == (2, 3)
    with pytest.raises(ConfigError):
        build_config("cluster", {"k": 0, "output": workspace / "out.json"}, config)
    with pytest.raises(ConfigError):
        build_config("stats", {"input": [workspace / "train.json"], "sizes": 3})


def test_environment_settings(
    workspace: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
) -> None:
    flags: dict[str, Any] = {"input": [workspace / "train.json"], "output": workspace / "out.json"}
    monkeypatch.setenv("POSE2SEG_WORKERS", "4")
    assert build_config("cluster", flags).workers == 4
    assert build_config("cluster", {**flags, "workers": 2}).workers == 2

    monkeypatch.setenv("POSE2SEG_WORKERS", "many")
    with pytest.raises(ConfigError):
        build_config("cluster", flags)
    assert run(["stats", "--input", str(workspace / "boxes.json")]) == 2
    assert last_json_line(capsys.readouterr().err)["variable"] == "POSE2SEG_WORKERS"

    monkeypatch.delenv("POSE2SEG_WORKERS")
    monkeypatch.setenv("POSE2SEG_LOG", "chatty")
    assert run(["stats", "--input", str(workspace / "boxes.json")]) == 2
    assert last_json_line(capsys.readouterr().err)["variable"] == "POSE2SEG_LOG"
