import json
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

from .errors import InputError, InvalidBBoxError
from .models import BBox

SCHEMA_VERSION = 1

try:
    TOOL_VERSION = version("pose2seg")
except PackageNotFoundError:
    TOOL_VERSION = "0.0.0"


def square_roi(bbox: BBox) -> tuple[float, float, float]:
    """Square around the bbox center whose side is the bbox's longer side.

    Returns:
        (x0, y0, side) of the square.
    """
    x, y, w, h = bbox
    if not (w > 0 and h > 0):
        raise InvalidBBoxError(f"bbox {bbox} has zero area", bbox=list(bbox))
    side = max(w, h)
    return x + w / 2 - side / 2, y + h / 2 - side / 2, side


def metadata() -> dict[str, Any]:
    return {
        "tool": "pose2seg",
        "version": TOOL_VERSION,
        "generated_at": datetime.now(timezone.utc).isoformat(),
    }


def write_json(path: Path, document: dict[str, Any]) -> Path:
    """Write a versioned JSON artifact. Keys are sorted so reruns are byte-stable."""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"schema_version": SCHEMA_VERSION} | document | {"metadata": metadata()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError) as e:
        raise InputError(f"cannot read {path}: {e}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}", path=str(path)) from e
