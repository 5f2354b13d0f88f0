"""Binary mask utilities: run-length codec and mask IoU.

The RLE format is row-major with alternating run counts, starting with a run
of zeros (the leading count may be ``0`` when the mask starts with ones).
Counts are space-separated decimal integers and must sum to ``H * W``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["rle_encode", "rle_decode", "mask_iou"]


def rle_encode(mask: np.ndarray) -> str:
    """Encode a 2-D binary mask as an alternating 0-run/1-run count string."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    flat = (mask.reshape(-1) != 0).astype(np.int8)
    if flat.size == 0:
        return ""
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return " ".join(str(r) for r in runs)


def rle_decode(rle: str, shape: tuple[int, int]) -> np.ndarray:
    """Decode an RLE string into a 2-D bool mask of the given ``(H, W)`` shape."""
    h, w = shape
    total = h * w
    rle = rle.strip()
    if not rle:
        if total == 0:
            return np.zeros(shape, dtype=bool)
        raise ValueError(f"empty RLE for non-empty shape {shape}")
    try:
        runs = [int(tok) for tok in rle.split()]
    except ValueError as exc:
        raise ValueError(f"RLE contains a non-integer token: {exc}") from None
    if any(r < 0 for r in runs):
        raise ValueError("RLE contains a negative run count")
    if sum(runs) != total:
        raise ValueError(f"RLE run counts sum to {sum(runs)}, expected {total}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks of equal shape; 0 when both are empty."""
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return inter / union
