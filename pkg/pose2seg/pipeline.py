import json
import logging
from collections.abc import Iterable
from os import getenv
from pathlib import Path
from typing import Any, Literal

import numpy as np
from dotenv import load_dotenv
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core.affine_align import (
    aligned_pose,
    roi_align_transform,
    select_template,
    warp_window,
    whole_image_fallback,
)
from .core.baseline import (
    DEFAULT_EXPANDS,
    DEFAULT_UNITS,
    Strategy,
    expansion_sweep,
    receptive_field_table,
    segment_dataset,
)
from .core.clustering import (
    collect_training_poses,
    kmeans_templates,
    load_template_bank,
    save_template_bank,
    template_bank,
)
from .core.dataset import (
    filter_occluded,
    merge_datasets,
    occlusion_records,
    occlusion_report,
    parse_annotations,
    render_report_table,
    split_dataset,
    split_from_manifest,
    to_coco,
)
from .core.errors import ConfigError, InputError, InvalidBBoxError
from .core.evaluation import (
    average_precision,
    ground_truths,
    load_predictions,
    occlusion_bins,
    prediction_records,
    render_ap_table,
    size_bins,
)
from .core.models import AlignTransform, Dataset, EvalBin, InstanceAnnotation, TemplateBank
from .core.skeleton_features import (
    save_channel_previews,
    skeleton_features,
    write_feature_tensor,
)
from .core.utils import read_json, write_json

load_dotenv()
LOG_LEVEL = (getenv("POSE2SEG_LOG") or "INFO").upper()
logging.basicConfig(level=LOG_LEVEL if isinstance(logging.getLevelName(LOG_LEVEL), int) else "INFO")
logger = logging.getLogger("Pose2Seg")


def environment_defaults() -> dict[str, Any]:
    """Settings read from POSE2SEG_* variables; config files and flags override them."""
    level = (getenv("POSE2SEG_LOG") or "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"POSE2SEG_LOG={level!r} is not a logging level", variable="POSE2SEG_LOG")
    workers = getenv("POSE2SEG_WORKERS")
    if not workers:
        return {}
    if not workers.strip().isdigit() or int(workers) < 1:
        raise ConfigError(
            f"POSE2SEG_WORKERS={workers!r} is not a positive integer",
            variable="POSE2SEG_WORKERS",
        )
    return {"workers": int(workers)}


Command = Literal[
    "cluster",
    "align",
    "skeleton",
    "stats",
    "filter",
    "split",
    "segment",
    "evaluate",
    "rf",
    "ablation",
]

# Paths each subcommand cannot run without.
REQUIRED: dict[str, tuple[str, ...]] = {
    "cluster": ("input", "output"),
    "align": ("input", "templates", "image_dir", "output"),
    "skeleton": ("input", "output"),
    "stats": ("input",),
    "filter": ("input", "output"),
    "split": ("input", "output"),
    "segment": ("input", "output"),
    "evaluate": ("input", "predictions"),
    "rf": (),
    "ablation": ("input",),
}


class RunConfig(BaseModel):
    """Everything a subcommand needs. Defaults < --config file < flags."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command
    input: list[Path] = Field(default_factory=list)
    output: Path | None = None
    templates: Path | None = None
    predictions: Path | None = None
    image_dir: Path | None = None
    manifest: Path | None = None
    size: int = Field(default=64, ge=8)
    k: int = Field(default=3, ge=1)
    seed: int = 0
    max_iter: int = Field(default=300, ge=1)
    maxiou_mode: Literal["bbox", "mask"] = "bbox"
    threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    expand: float = Field(default=0.0, ge=0.0)
    expands: list[float] = Field(default_factory=lambda: list(DEFAULT_EXPANDS))
    format: Literal["json", "table"] = "json"
    bins: Literal["occlusion", "size"] = "occlusion"
    exclude_small: bool = True
    val_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    strategy: Strategy = "pose"
    previews: bool = False
    units: list[int] = Field(default_factory=lambda: list(DEFAULT_UNITS))
    residual_convs: int = Field(default=1, ge=0)
    residual_kernel: int = Field(default=3, ge=1)
    include_crowd: bool = False
    sigma: float | None = Field(default=None, gt=0.0)
    limb_width: float | None = Field(default=None, gt=0.0)
    dilation: int = Field(default=3, ge=0)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_paths(self) -> "RunConfig":
        for name in REQUIRED[self.command]:
            if not getattr(self, name):
                raise ConfigError(f"'{self.command}' needs --{name.replace('_', '-')}")
        if self.command == "segment" and self.strategy == "pose" and self.templates is None:
            raise ConfigError("pose segmentation needs --templates")
        for path in [*self.input, self.templates, self.predictions, self.manifest]:
            if path is not None and not path.is_file():
                raise InputError(f"{path} does not exist or is not a file", path=str(path))
        if self.image_dir is not None and not self.image_dir.is_dir():
            raise InputError(f"{self.image_dir} is not a directory", path=str(self.image_dir))
        return self


def build_config(
    command: str, flags: dict[str, Any], config_file: Path | None = None
) -> RunConfig:
    """Merge environment settings, a JSON config file and command-line flags; flags win."""
    values = environment_defaults()
    if config_file is not None:
        document = read_json(config_file)
        if not isinstance(document, dict):
            raise ConfigError(f"{config_file} must hold a JSON object")
        values.update(document)
    values.update(flags)
    values["command"] = command
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        error = e.errors()[0]
        field = ".".join(str(part) for part in error["loc"])
        raise ConfigError(f"invalid {field}: {error['msg']}", field=field) from e


def load_dataset(paths: Iterable[Path]) -> Dataset:
    return merge_datasets(parse_annotations(path) for path in paths)


def _emit(config: RunConfig, document: dict[str, Any], table: str) -> str:
    """Write the JSON artifact when asked and return what goes to stdout."""
    if config.output is not None:
        write_json(config.output, document)
        logger.info(f"Wrote {config.output}")
    if config.format == "table":
        return table
    return "" if config.output is not None else json.dumps(document, indent=2, sort_keys=True)


def _instance_transform(
    instance: InstanceAnnotation,
    bank: TemplateBank | None,
    config: RunConfig,
    image_size: tuple[int, int],
) -> AlignTransform:
    assert instance.keypoints is not None
    if bank is not None:
        return select_template(instance.keypoints, bank.templates, config.size)
    try:
        return roi_align_transform(instance.bbox, config.size)
    except InvalidBBoxError:
        return whole_image_fallback(image_size, config.size)


def cluster(config: RunConfig) -> str:
    """Pose templates from the training annotations."""
    dataset = load_dataset(config.input)
    poses = collect_training_poses(dataset)
    logger.info(f"Clustering {len(poses)} normalized poses into K={config.k} templates")
    result = kmeans_templates(poses, config.k, config.seed, config.max_iter)
    assert config.output is not None
    save_template_bank(template_bank(result), config.output)
    logger.info(f"Wrote template bank to {config.output}")
    return (
        f"K={config.k} objective={result.objective:.6f} iterations={result.iterations} "
        f"converged={result.converged}"
    )


def align(config: RunConfig) -> str:
    """Aligned crops plus a transform sidecar for every person with keypoints."""
    assert config.templates is not None and config.image_dir is not None
    assert config.output is not None
    dataset = load_dataset(config.input)
    bank = load_template_bank(config.templates)
    written = 0
    for image_id, instances in dataset.by_image().items():
        image = dataset.images[image_id]
        path = config.image_dir / image.file_name
        try:
            with Image.open(path) as source:
                pixels = np.asarray(source.convert("RGB"), dtype=float)
        except OSError as e:
            raise InputError(f"cannot read image {path}: {e}", path=str(path)) from e
        for instance in instances:
            if instance.keypoints is None or instance.iscrowd:
                continue
            transform = select_template(instance.keypoints, bank.templates, config.size)
            if transform.is_fallback:
                logger.warning(f"Instance {instance.id} aligned on the whole image")
            window = warp_window(pixels, transform, config.size, image_id)
            stem = config.output / f"{image_id}_{instance.id}"
            stem.parent.mkdir(parents=True, exist_ok=True)
            crop = np.clip(window.pixels, 0, 255).round().astype(np.uint8)
            Image.fromarray(crop).save(stem.with_suffix(".png"))
            write_json(stem.with_suffix(".json"), transform.model_dump(mode="json"))
            written += 1
    logger.info(f"Wrote {written} aligned crops to {config.output}")
    return f"aligned={written}"


def skeleton(config: RunConfig) -> str:
    """Skeleton feature tensors in the aligned frame, one file per instance."""
    assert config.output is not None
    dataset = load_dataset(config.input)
    bank = load_template_bank(config.templates) if config.templates else None
    written = 0
    for instance in dataset.instances:
        if instance.keypoints is None or instance.iscrowd:
            continue
        image = dataset.images[instance.image_id]
        transform = _instance_transform(instance, bank, config, (image.width, image.height))
        features = skeleton_features(
            aligned_pose(instance.keypoints, transform, config.size),
            config.size,
            config.sigma,
            config.limb_width,
        )
        write_feature_tensor(config.output / f"{instance.id}.p2sf", features.raster)
        if config.previews:
            save_channel_previews(features, config.output / f"{instance.id}_previews")
        written += 1
    logger.info(f"Wrote {written} feature tensors to {config.output}")
    return f"tensors={written}"


def stats(config: RunConfig) -> str:
    """Occlusion statistics of the annotations."""
    dataset = load_dataset(config.input)
    records = occlusion_records(dataset, config.maxiou_mode, config.include_crowd, config.workers)
    report = occlusion_report(dataset, records, config.maxiou_mode)
    return _emit(
        config,
        {"report": report.model_dump(mode="json")},
        render_report_table(report, title=", ".join(p.name for p in config.input)),
    )


def filter_subset(config: RunConfig) -> str:
    """Write the heavily occluded subset as COCO JSON."""
    assert config.output is not None
    dataset = load_dataset(config.input)
    subset, report = filter_occluded(
        dataset, config.threshold, config.maxiou_mode, config.include_crowd, config.workers
    )
    write_json(config.output, to_coco(subset) | {"report": report.model_dump(mode="json")})
    logger.info(f"Wrote {len(subset)} instances to {config.output}")
    return render_report_table(report) if config.format == "table" else f"retained={len(subset)}"


def split(config: RunConfig) -> str:
    """val.json and test.json by image, from a manifest or a seeded draw."""
    assert config.output is not None
    dataset = load_dataset(config.input)
    if config.manifest is not None:
        val, test = split_from_manifest(dataset, read_json(config.manifest))
    else:
        val, test = split_dataset(dataset, config.seed, config.val_fraction)
    for name, part in (("val", val), ("test", test)):
        write_json(config.output / f"{name}.json", to_coco(part))
    logger.info(f"Split into {len(val.images)} val and {len(test.images)} test images")
    return f"val={len(val)} test={len(test)}"


def segment(config: RunConfig) -> str:
    """Baseline masks for every person, as COCO results JSON."""
    assert config.output is not None
    dataset = load_dataset(config.input)
    bank = load_template_bank(config.templates) if config.templates else None
    predictions = segment_dataset(
        dataset,
        bank if config.strategy == "pose" else None,
        config.strategy,
        config.size,
        config.expand,
        config.sigma,
        config.limb_width,
        config.dilation,
        config.workers,
    )
    write_json(config.output, {"results": prediction_records(predictions)})
    logger.info(f"Wrote {len(predictions)} predictions to {config.output}")
    return f"predictions={len(predictions)}"


def _bins(config: RunConfig, dataset: Dataset) -> tuple[EvalBin, list[EvalBin]]:
    if config.bins == "size":
        return size_bins(config.exclude_small)
    return occlusion_bins(
        occlusion_records(dataset, config.maxiou_mode, config.include_crowd, config.workers)
    )


def evaluate(config: RunConfig) -> str:
    """Mask AP of a predictions file against the annotations."""
    assert config.predictions is not None
    dataset = load_dataset(config.input)
    predictions = load_predictions(config.predictions, dataset)
    overall, bins = _bins(config, dataset)
    report = average_precision(
        predictions, ground_truths(dataset), overall=overall, bins=bins, workers=config.workers
    )
    logger.info(f"AP {report.ap:.3f} over {len(predictions)} predictions")
    return _emit(
        config,
        {"bins": config.bins, "report": report.model_dump(mode="json")},
        render_ap_table({config.predictions.stem: report}),
    )


def rf(config: RunConfig) -> str:
    """Receptive field of the segmentation module per residual-unit count."""
    table = receptive_field_table(config.units, config.residual_convs, config.residual_kernel)
    lines = [f"{'units':>5}  {'receptive field':>15}"]
    lines += [f"{units:>5}  {field:>15.1f}" for units, field in table.items()]
    return _emit(
        config,
        {
            "residual_convs": config.residual_convs,
            "residual_kernel": config.residual_kernel,
            "receptive_field": {str(units): field for units, field in table.items()},
        },
        "\n".join(lines),
    )


def ablation(config: RunConfig) -> str:
    """Box-versus-pose alignment grid with the baseline segmenter."""
    dataset = load_dataset(config.input)
    bank = load_template_bank(config.templates) if config.templates else None
    overall, bins = _bins(config, dataset)
    reports = expansion_sweep(
        dataset,
        bank,
        config.expands,
        overall,
        bins,
        config.size,
        config.sigma,
        config.limb_width,
        config.dilation,
        config.workers,
    )
    return _emit(
        config,
        {
            "bins": config.bins,
            "reports": {
                name: report.model_dump(mode="json", exclude={"curves"})
                for name, report in reports.items()
            },
        },
        render_ap_table(reports),
    )


HANDLERS = {
    "cluster": cluster,
    "align": align,
    "skeleton": skeleton,
    "stats": stats,
    "filter": filter_subset,
    "split": split,
    "segment": segment,
    "evaluate": evaluate,
    "rf": rf,
    "ablation": ablation,
}


def execute(config: RunConfig) -> str:
    logger.info(f"Running {config.command}")
    return HANDLERS[config.command](config)
