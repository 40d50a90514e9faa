from .affine_align import select_template, warp_window
from .baseline import baseline_segment, segment_dataset
from .clustering import kmeans_templates, load_template_bank
from .dataset import filter_occluded, parse_annotations
from .errors import Pose2SegError
from .evaluation import average_precision
from .models import AlignTransform, Dataset, Pose, TemplateBank

__all__ = [
    "AlignTransform",
    "Dataset",
    "Pose",
    "Pose2SegError",
    "TemplateBank",
    "average_precision",
    "baseline_segment",
    "filter_occluded",
    "kmeans_templates",
    "load_template_bank",
    "parse_annotations",
    "segment_dataset",
    "select_template",
    "warp_window",
]
