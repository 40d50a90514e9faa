from typing import Any

import numpy as np
from numpy.typing import NDArray
from pycocotools import mask as mask_utils
from skimage.draw import polygon2mask

from .errors import CorruptMaskError, DimensionMismatchError
from .models import BBox, BoolArray, CompressedRle, MaskSource, PolygonMask, UncompressedRle


def rle_counts(mask: NDArray[Any]) -> list[int]:
    """Column-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def compressed_run_total(encoded: str) -> int:
    """
    Total pixel count covered by a COCO compressed counts string.

    pycocotools decodes without bounds checks, so strings are measured before decoding.
    """
    chars = [ord(c) - 48 for c in encoded]
    if any(not 0 <= c < 64 for c in chars):
        raise CorruptMaskError(f"invalid character in compressed RLE {encoded[:16]!r}")
    if chars and chars[-1] & 0x20:
        raise CorruptMaskError("compressed RLE ends inside a run length")
    counts: list[int] = []
    x = shift = 0
    for c in chars:
        x |= (c & 0x1F) << shift
        shift += 5
        if c & 0x20:
            continue
        if c & 0x10:
            x -= 1 << shift
        if len(counts) > 2:
            x += counts[-2]
        if x < 0:
            raise CorruptMaskError("RLE holds negative run lengths")
        counts.append(x)
        x = shift = 0
    return sum(counts)


def _check_total(total: int, height: int, width: int) -> None:
    if total != height * width:
        raise CorruptMaskError(
            f"RLE counts sum to {total}, expected {height}x{width}={height * width}"
        )


def _rasterize_polygons(polygons: list[list[float]], height: int, width: int) -> BoolArray:
    mask = np.zeros((height, width), dtype=bool)
    for polygon in polygons:
        if len(polygon) < 6 or len(polygon) % 2:
            raise CorruptMaskError(f"polygon with {len(polygon)} values is not a polygon")
        xy = np.asarray(polygon, dtype=float).reshape(-1, 2)
        # Pixel (r, c) covers [c, c+1) x [r, r+1); test its center.
        mask |= polygon2mask((height, width), xy[:, ::-1] - 0.5)
    return mask


def decode_mask(source: MaskSource, width: int, height: int) -> BoolArray:
    """
    Rasterize a mask source to an (height, width) boolean array.

    Args:
        source: Polygons, uncompressed RLE or compressed RLE.
        width: Image width.
        height: Image height.

    Returns:
        The binary mask.
    """
    if width <= 0 or height <= 0:
        raise DimensionMismatchError(f"mask dimensions must be positive, got {width}x{height}")
    if isinstance(source, PolygonMask):
        return _rasterize_polygons(source.polygons, height, width)
    if tuple(source.size) != (height, width):
        raise DimensionMismatchError(
            f"RLE size {list(source.size)} does not match image {height}x{width}"
        )
    if isinstance(source, UncompressedRle):
        if any(c < 0 for c in source.counts):
            raise CorruptMaskError("RLE holds negative run lengths")
        _check_total(sum(source.counts), height, width)
        rle = mask_utils.frPyObjects(
            {"counts": list(source.counts), "size": [height, width]}, height, width
        )
    else:
        _check_total(compressed_run_total(source.counts), height, width)
        rle = {"counts": source.counts.encode("ascii"), "size": [height, width]}
    return np.asarray(mask_utils.decode(rle), dtype=bool)


def encode_mask(
    mask: NDArray[Any], compressed: bool = True
) -> UncompressedRle | CompressedRle:
    height, width = np.asarray(mask).shape
    if not compressed:
        return UncompressedRle(counts=rle_counts(mask), size=(height, width))
    rle = mask_utils.encode(np.asfortranarray(np.asarray(mask, dtype=np.uint8)))
    return CompressedRle(counts=rle["counts"].decode("ascii"), size=(height, width))


def mask_iou(a: NDArray[Any], b: NDArray[Any]) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def bbox_iou(a: BBox, b: BBox) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


def pairwise_bbox_iou(boxes: NDArray[Any]) -> NDArray[np.float64]:
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    x1, y1 = boxes[:, 0], boxes[:, 1]
    x2, y2 = x1 + boxes[:, 2], y1 + boxes[:, 3]
    iw = np.clip(np.minimum(x2[:, None], x2) - np.maximum(x1[:, None], x1), 0, None)
    ih = np.clip(np.minimum(y2[:, None], y2) - np.maximum(y1[:, None], y1), 0, None)
    inter = iw * ih
    area = boxes[:, 2] * boxes[:, 3]
    union = area[:, None] + area - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def pairwise_mask_iou(masks: list[BoolArray]) -> NDArray[np.float64]:
    if not masks:
        return np.zeros((0, 0))
    flat = np.stack([m.ravel() for m in masks]).astype(np.float64)
    inter = flat @ flat.T
    area = flat.sum(axis=1)
    union = area[:, None] + area - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
