from .core import (
    AlignTransform,
    Dataset,
    Pose,
    Pose2SegError,
    TemplateBank,
    average_precision,
    kmeans_templates,
    parse_annotations,
    select_template,
)
from .pipeline import RunConfig, build_config, execute

__all__ = [
    "AlignTransform",
    "Dataset",
    "Pose",
    "Pose2SegError",
    "RunConfig",
    "TemplateBank",
    "average_precision",
    "build_config",
    "execute",
    "kmeans_templates",
    "parse_annotations",
    "select_template",
]
