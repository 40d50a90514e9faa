from typing import Any


class Pose2SegError(Exception):
    """Base error. `kind` and `exit_code` are surfaced by the CLI."""

    kind: str = "error"
    exit_code: int = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details: dict[str, Any] = details

    def to_dict(self) -> dict[str, Any]:
        return {
            "error": self.kind,
            "message": str(self),
            "exit_code": self.exit_code,
        } | self.details


class ConfigError(Pose2SegError):
    kind = "config"
    exit_code = 2


class InputError(Pose2SegError):
    kind = "unreadable_input"
    exit_code = 3


class AnnotationFormatError(Pose2SegError):
    kind = "format"
    exit_code = 4


class InvalidKeypointError(Pose2SegError):
    kind = "invalid_keypoint"
    exit_code = 4


class InvalidBBoxError(Pose2SegError):
    kind = "invalid_bbox"
    exit_code = 4


class CorruptMaskError(Pose2SegError):
    kind = "corrupt_mask"
    exit_code = 4


class AnnotationReferenceError(Pose2SegError):
    kind = "reference"
    exit_code = 5


class DimensionMismatchError(Pose2SegError):
    kind = "dimension_mismatch"
    exit_code = 6


class InsufficientDataError(Pose2SegError):
    kind = "insufficient_data"
    exit_code = 6


class DegenerateConfigurationError(Pose2SegError):
    kind = "degenerate_configuration"
    exit_code = 6


class SingularTransformError(Pose2SegError):
    kind = "singular_transform"
    exit_code = 6


class TemplateValidityError(Pose2SegError):
    kind = "template_validity"
    exit_code = 6


class UndefinedApError(Pose2SegError):
    kind = "undefined_ap"
    exit_code = 6
