"""Axis-aligned box algebra.

Boxes are stored in corner form ``[x1, y1, x2, y2]`` with continuous pixel
coordinates and strictly positive width/height.  Center form ``(cx, cy, w, h)``
is derived on demand; only the regression offset codec needs it.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "InvalidBoxError",
    "as_box",
    "box_area",
    "to_center",
    "to_corner",
    "clip_box",
    "iou",
    "iou_matrix",
    "nms",
    "encode_offset",
    "decode_offset",
]


class InvalidBoxError(ValueError):
    """Raised when a box has non-positive width or height."""


def as_box(b) -> np.ndarray:
    """Coerce to a float64 ``[x1, y1, x2, y2]`` array, validating shape and extent."""
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape != (4,):
        raise InvalidBoxError(f"box must have 4 coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidBoxError(f"box has non-finite coordinates: {arr}")
    if arr[2] <= arr[0] or arr[3] <= arr[1]:
        raise InvalidBoxError(f"box has non-positive extent: {arr}")
    return arr


def box_area(b) -> float:
    b = as_box(b)
    return float((b[2] - b[0]) * (b[3] - b[1]))


def to_center(b) -> np.ndarray:
    """Corner form -> ``[cx, cy, w, h]``."""
    b = as_box(b)
    w = b[2] - b[0]
    h = b[3] - b[1]
    return np.array([b[0] + 0.5 * w, b[1] + 0.5 * h, w, h])


def to_corner(c) -> np.ndarray:
    """``[cx, cy, w, h]`` -> corner form."""
    c = np.asarray(c, dtype=np.float64)
    cx, cy, w, h = c
    return as_box([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h])


def clip_box(b, width: float, height: float) -> np.ndarray:
    """Clip a box to ``[0, width] x [0, height]``, keeping at least 1px extent."""
    b = as_box(b)
    x1 = min(max(b[0], 0.0), width - 1.0)
    y1 = min(max(b[1], 0.0), height - 1.0)
    x2 = min(max(b[2], x1 + 1.0), width)
    y2 = min(max(b[3], y1 + 1.0), height)
    return np.array([x1, y1, x2, y2])


def iou(a, b) -> float:
    """Intersection over union of two valid boxes; 0 when disjoint."""
    a = as_box(a)
    b = as_box(b)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    return float(inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for two ``(N, 4)`` / ``(M, 4)`` corner-form arrays -> ``(N, M)``."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    if a.size and (np.any(a[:, 2] <= a[:, 0]) or np.any(a[:, 3] <= a[:, 1])):
        raise InvalidBoxError("boxes_a contains a degenerate box")
    if b.size and (np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1])):
        raise InvalidBoxError("boxes_b contains a degenerate box")
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix = np.clip(
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0.0, None,
    )
    iy = np.clip(
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
        0.0, None,
    )
    inter = ix * iy
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def nms(boxes, scores, threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (ties broken by lower index);
    a box is suppressed iff its IoU with an already-kept box exceeds
    ``threshold`` (strictly).  Returns kept indices in descending score order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes vs {len(scores)} scores")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if len(boxes) == 0:
        return []
    # stable sort on -score keeps lower index first among ties
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in order:
        i = int(i)
        if all(ious[i, j] <= threshold for j in kept):
            kept.append(i)
    return kept


def encode_offset(p, g) -> np.ndarray:
    """Encode target box ``g`` relative to proposal ``p`` as ``[tx, ty, tw, th]``.

    Center shifts are normalized by the proposal size, sizes by log ratio:
    ``tx = (gx - px) / pw``, ``tw = log(gw / pw)`` (same for y/h).
    """
    pc = to_center(p)
    gc = to_center(g)
    return np.array([
        (gc[0] - pc[0]) / pc[2],
        (gc[1] - pc[1]) / pc[3],
        np.log(gc[2] / pc[2]),
        np.log(gc[3] / pc[3]),
    ])


def decode_offset(t, p) -> np.ndarray:
    """Apply offset ``t`` to proposal ``p``; returns the corner-form box."""
    t = np.asarray(t, dtype=np.float64).reshape(4)
    pc = to_center(p)
    gx = t[0] * pc[2] + pc[0]
    gy = t[1] * pc[3] + pc[1]
    gw = pc[2] * np.exp(t[2])
    gh = pc[3] * np.exp(t[3])
    return to_corner([gx, gy, gw, gh])
