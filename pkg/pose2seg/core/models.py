import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, Any, Literal

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import InvalidKeypointError, SingularTransformError

NUM_KEYPOINTS = 17
NUM_LIMBS = 19
NUM_FEATURE_CHANNELS = NUM_KEYPOINTS + 2 * NUM_LIMBS
MIN_TEMPLATE_JOINTS = 3
TEMPLATE_VALID_THRESHOLD = 0.5

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]
BBox = tuple[float, float, float, float]  # x, y, w, h


# Pose taxonomy


class KeypointSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0, lt=NUM_KEYPOINTS)
    name: str
    mirror_index: int = Field(ge=0, lt=NUM_KEYPOINTS)


class SkeletonSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    limbs: tuple[tuple[int, int], ...]

    @field_validator("limbs")
    @classmethod
    def check_limbs(cls, limbs: tuple[tuple[int, int], ...]) -> tuple[tuple[int, int], ...]:
        if len(limbs) != NUM_LIMBS:
            raise ValueError(f"expected {NUM_LIMBS} limbs, got {len(limbs)}")
        if len(set(limbs)) != len(limbs):
            raise ValueError("duplicate limbs")
        for a, b in limbs:
            if not (0 <= a < NUM_KEYPOINTS and 0 <= b < NUM_KEYPOINTS):
                raise ValueError(f"limb ({a}, {b}) references an unknown joint")
        return limbs


class CoordinateSpace(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["pixel", "unit_square"] = "unit_square"
    width: float = 1.0
    height: float = 1.0

    @model_validator(mode="after")
    def check_extent(self) -> "CoordinateSpace":
        if self.width <= 0 or self.height <= 0:
            raise ValueError("coordinate space must have a positive extent")
        if self.kind == "unit_square" and (self.width, self.height) != (1.0, 1.0):
            raise ValueError("unit_square space is 1x1")
        return self

    @classmethod
    def pixel(cls, width: float, height: float) -> "CoordinateSpace":
        return cls(kind="pixel", width=width, height=height)

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height


UNIT_SQUARE = CoordinateSpace()


class EncodedKeypoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float = 0.5
    y: float = 0.5
    v: Literal[0, 1, 2] = 0

    @model_validator(mode="after")
    def check_sentinel(self) -> "EncodedKeypoint":
        if self.v == 0 and (self.x, self.y) != (0.5, 0.5):
            raise ValueError("a keypoint with v=0 must sit at (0.5, 0.5)")
        return self

    @property
    def valid(self) -> bool:
        return self.v > 0


MISSING_KEYPOINT = EncodedKeypoint()


class Pose(BaseModel):
    model_config = ConfigDict(frozen=True)

    keypoints: tuple[EncodedKeypoint, ...]
    space: CoordinateSpace = UNIT_SQUARE

    @model_validator(mode="after")
    def check_keypoints(self) -> "Pose":
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise ValueError(
                f"a pose holds exactly {NUM_KEYPOINTS} keypoints, got {len(self.keypoints)}"
            )
        for i, kp in enumerate(self.keypoints):
            if kp.valid and not self.space.contains(kp.x, kp.y):
                raise InvalidKeypointError(
                    f"keypoint {i} at ({kp.x}, {kp.y}) lies outside the {self.space.kind} space",
                    index=i,
                )
        return self

    @classmethod
    def from_array(
        cls, array: NDArray[Any], space: CoordinateSpace = UNIT_SQUARE
    ) -> "Pose":
        rows = np.asarray(array, dtype=float).reshape(NUM_KEYPOINTS, 3)
        keypoints = tuple(
            EncodedKeypoint(x=float(x), y=float(y), v=int(v))  # type: ignore[arg-type]
            if v > 0
            else MISSING_KEYPOINT
            for x, y, v in rows
        )
        return cls(keypoints=keypoints, space=space)

    @classmethod
    def empty(cls, space: CoordinateSpace = UNIT_SQUARE) -> "Pose":
        return cls(keypoints=(MISSING_KEYPOINT,) * NUM_KEYPOINTS, space=space)

    def to_array(self) -> FloatArray:
        return np.array([[kp.x, kp.y, kp.v] for kp in self.keypoints], dtype=float)

    def valid_mask(self) -> BoolArray:
        return np.array([kp.valid for kp in self.keypoints], dtype=bool)


# Templates


class PoseTemplate(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: tuple[tuple[float, float, float], ...]
    valid_mask: tuple[bool, ...]

    @model_validator(mode="after")
    def check_mask(self) -> "PoseTemplate":
        if len(self.mean) != NUM_KEYPOINTS or len(self.valid_mask) != NUM_KEYPOINTS:
            raise ValueError(f"a template holds exactly {NUM_KEYPOINTS} joints")
        for i, ((_, _, v), valid) in enumerate(zip(self.mean, self.valid_mask)):
            if valid != (v > TEMPLATE_VALID_THRESHOLD):
                raise ValueError(f"valid_mask[{i}] disagrees with mean v={v}")
        return self

    @classmethod
    def from_mean(cls, mean: NDArray[Any]) -> "PoseTemplate":
        rows = np.asarray(mean, dtype=float).reshape(NUM_KEYPOINTS, 3)
        return cls(
            mean=tuple((float(x), float(y), float(v)) for x, y, v in rows),
            valid_mask=tuple(bool(v > TEMPLATE_VALID_THRESHOLD) for v in rows[:, 2]),
        )

    def mean_array(self) -> FloatArray:
        return np.array(self.mean, dtype=float)

    def valid_array(self) -> BoolArray:
        return np.array(self.valid_mask, dtype=bool)

    @property
    def valid_count(self) -> int:
        return sum(self.valid_mask)

    @property
    def usable(self) -> bool:
        return self.valid_count >= MIN_TEMPLATE_JOINTS


class TemplateBank(BaseModel):
    version: int = 1
    K: int
    joint_names: list[str]
    templates: list[PoseTemplate]
    metadata: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_size(self) -> "TemplateBank":
        if self.K != len(self.templates):
            raise ValueError(f"K={self.K} but {len(self.templates)} templates stored")
        return self

    def unusable(self) -> list[int]:
        return [i for i, template in enumerate(self.templates) if not template.usable]


class ClusteringResult(BaseModel):
    templates: list[PoseTemplate]
    assignments: list[int]
    objective: float
    iterations: int
    converged: bool
    history: list[float]
    unusable_templates: list[int] = Field(default_factory=list)


# Alignment


class AlignTransform(BaseModel):
    model_config = ConfigDict(frozen=True)

    matrix: tuple[tuple[float, float, float], tuple[float, float, float]]
    flipped: bool = False
    # None when no template fit was made
    residual: float | None = Field(default=0.0, ge=0.0)
    score: float = Field(default=1.0, ge=0.0, le=1.0)
    template_index: int = -1
    strategy: Literal["pose", "bbox", "fallback"] = "pose"

    @classmethod
    def from_array(cls, matrix: NDArray[Any], **fields: Any) -> "AlignTransform":
        m = np.asarray(matrix, dtype=float)[:2, :3]
        rows = tuple(tuple(float(value) for value in row) for row in m)
        return cls(matrix=rows, **fields)  # type: ignore[arg-type]

    @property
    def is_fallback(self) -> bool:
        return self.strategy == "fallback"

    def matrix_array(self) -> FloatArray:
        return np.array(self.matrix, dtype=float)

    def homogeneous(self) -> FloatArray:
        return np.vstack([self.matrix_array(), [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> FloatArray:
        linear = self.matrix_array()[:, :2]
        det = float(np.linalg.det(linear))
        if not math.isfinite(det) or abs(det) < 1e-12:
            raise SingularTransformError(f"transform is not invertible (det={det})")
        return np.linalg.inv(self.homogeneous())[:2]


@dataclass(frozen=True, eq=False)
class AlignedWindow:
    pixels: FloatArray
    transform: AlignTransform
    size: int
    image_id: int | None = None

    def __post_init__(self) -> None:
        if self.pixels.shape[:2] != (self.size, self.size):
            raise ValueError(
                f"window is {self.pixels.shape[:2]}, expected {self.size}x{self.size}"
            )


@dataclass(frozen=True, eq=False)
class SkeletonFeatureMap:
    raster: NDArray[np.float32]

    def __post_init__(self) -> None:
        if self.raster.ndim != 3 or self.raster.shape[0] != NUM_FEATURE_CHANNELS:
            raise ValueError(
                f"skeleton features need {NUM_FEATURE_CHANNELS} channels, got {self.raster.shape}"
            )

    @property
    def size(self) -> int:
        return int(self.raster.shape[1])

    @property
    def confidence(self) -> NDArray[np.float32]:
        return self.raster[:NUM_KEYPOINTS]

    @property
    def pafs(self) -> NDArray[np.float32]:
        return self.raster[NUM_KEYPOINTS:]


# Annotations


class ImageInfo(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: int
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    file_name: str = ""


class PolygonMask(BaseModel):
    kind: Literal["polygon"] = "polygon"
    polygons: list[list[float]]


class UncompressedRle(BaseModel):
    kind: Literal["rle"] = "rle"
    counts: list[int]
    size: tuple[int, int]  # height, width


class CompressedRle(BaseModel):
    kind: Literal["compressed_rle"] = "compressed_rle"
    counts: str
    size: tuple[int, int]  # height, width


MaskSource = Annotated[
    PolygonMask | UncompressedRle | CompressedRle, Field(discriminator="kind")
]


class InstanceAnnotation(BaseModel):
    id: int
    image_id: int
    category_id: int = 1
    bbox: BBox
    keypoints: Pose | None = None
    mask: MaskSource | None = None
    iscrowd: bool = False
    area: float = Field(default=0.0, ge=0.0)

    @field_validator("bbox")
    @classmethod
    def check_bbox(cls, bbox: BBox) -> BBox:
        if bbox[2] < 0 or bbox[3] < 0:
            raise ValueError(f"bbox has negative extent: {bbox}")
        return bbox


class RejectedRecord(BaseModel):
    id: int | None
    reason: str


class Dataset(BaseModel):
    images: dict[int, ImageInfo] = Field(default_factory=dict)
    instances: list[InstanceAnnotation] = Field(default_factory=list)
    categories: list[dict[str, Any]] = Field(default_factory=list)
    rejected: list[RejectedRecord] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def by_image(self) -> dict[int, list[InstanceAnnotation]]:
        """Instances grouped by image id, in ascending image id order."""
        groups: dict[int, list[InstanceAnnotation]] = {}
        for instance in self.instances:
            groups.setdefault(instance.image_id, []).append(instance)
        return {image_id: groups[image_id] for image_id in sorted(groups)}

    def subset(self, instance_ids: set[int]) -> "Dataset":
        """Keep the given instances and the images that still hold one of them."""
        instances = [i for i in self.instances if i.id in instance_ids]
        image_ids = {i.image_id for i in instances}
        return Dataset(
            images={k: v for k, v in self.images.items() if k in image_ids},
            instances=instances,
            categories=self.categories,
        )

    def subset_images(self, image_ids: set[int]) -> "Dataset":
        return Dataset(
            images={k: v for k, v in self.images.items() if k in image_ids},
            instances=[i for i in self.instances if i.image_id in image_ids],
            categories=self.categories,
        )


# Occlusion


class Severity(str, Enum):
    NONE = "none"
    MODERATE = "moderate"
    HARD = "hard"


MODERATE_MAX_IOU = 0.5
HARD_MAX_IOU = 0.75


def severity_for(max_iou: float) -> Severity:
    if max_iou < MODERATE_MAX_IOU:
        return Severity.NONE
    if max_iou <= HARD_MAX_IOU:
        return Severity.MODERATE
    return Severity.HARD


class OcclusionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    instance_id: int
    image_id: int
    max_iou: float = Field(ge=0.0, le=1.0)
    partner_id: int | None = None
    severity: Severity

    @model_validator(mode="after")
    def check_severity(self) -> "OcclusionRecord":
        if self.severity != severity_for(self.max_iou):
            raise ValueError(f"severity {self.severity} does not match MaxIoU {self.max_iou}")
        return self


class OcclusionReport(BaseModel):
    mode: Literal["bbox", "mask"]
    images: int
    persons: int
    evaluated: int
    oc_050: int
    oc_075: int
    average_max_iou: float
    threshold: float | None = None
    retained: int | None = None


# Evaluation


@dataclass(frozen=True, eq=False)
class Prediction:
    id: int
    image_id: int
    mask: BoolArray
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"prediction {self.id} has a non-finite score")

    @property
    def area(self) -> float:
        return float(self.mask.sum())


@dataclass(frozen=True, eq=False)
class GroundTruth:
    id: int
    image_id: int
    mask: BoolArray
    area: float = field(default=-1.0)
    iscrowd: bool = False

    def __post_init__(self) -> None:
        if self.area < 0:
            object.__setattr__(self, "area", float(self.mask.sum()))


class EvalBin(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    gt_ids: frozenset[int] | None = None
    area_range: tuple[float, float] | None = None

    def contains_area(self, area: float) -> bool:
        return self.area_range is None or self.area_range[0] <= area <= self.area_range[1]

    def contains(self, gt: GroundTruth) -> bool:
        return (self.gt_ids is None or gt.id in self.gt_ids) and self.contains_area(gt.area)


class Matching(BaseModel):
    matches: dict[int, int] = Field(default_factory=dict)
    false_positives: list[int] = Field(default_factory=list)
    false_negatives: list[int] = Field(default_factory=list)
    ignored_predictions: list[int] = Field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


class PrCurve(BaseModel):
    iou_threshold: float
    recall: list[float]
    precision: list[float]


class BinCounts(BaseModel):
    gts: int
    tp: int
    fn: int


class ApReport(BaseModel):
    ap: float | None
    bins: dict[str, float | None] = Field(default_factory=dict)
    per_threshold: dict[str, list[float | None]] = Field(default_factory=dict)
    thresholds: list[float]
    curves: list[PrCurve] = Field(default_factory=list)
    counts: dict[str, BinCounts] = Field(default_factory=dict)


# Receptive field analysis


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kernel: int = Field(ge=1)
    stride: int = Field(default=1, ge=1)
    kind: Literal["conv", "residual_unit", "upsample"] = "conv"
