"""Detection and instance-mask prediction from a trained model.

Per image: refinement-branch scores are averaged per proposal, proposals
whose argmax is background are dropped, boxes are regressed and clipped,
low scores are floored away, and per-category NMS keeps the survivors.
Masks for each surviving detection come from one of four sources: the
normalized activation-map channel, the segmentation head channel, their
ensemble average (both thresholded strictly at 0.4), or the box itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import clip_box, decode_offset, nms
from .masks import mask_iou, rle_encode
from .netcore import WsisModel
from .pseudolabel import minmax_normalize

__all__ = [
    "InstancePrediction",
    "MASK_SOURCES",
    "MASK_THRESHOLD",
    "detect",
    "ensemble_mask",
    "paste_mask",
    "snap_to_segment_proposal",
    "predict_instances",
    "default_mask_source",
    "write_predictions",
    "load_predictions",
]

MASK_SOURCES = ("ensemble", "cam", "seg", "box")
MASK_THRESHOLD = 0.4
SCORE_FLOOR = 0.01
NMS_THRESHOLD = 0.3


@dataclass
class InstancePrediction:
    category: int
    score: float
    box: np.ndarray               # (4,) regressed and clipped
    mask: np.ndarray | None       # (H, W) bool full-image mask
    mask_grid: np.ndarray | None  # (T, T) binary pre-paste mask
    proposal_index: int


def detect(model: WsisModel, image: np.ndarray, boxes: np.ndarray,
           apply_regression: bool = True, score_floor: float = SCORE_FLOOR,
           nms_threshold: float = NMS_THRESHOLD,
           ) -> list[tuple[np.ndarray, int, float, int]]:
    """Score proposals and return detections as (box, category, score,
    proposal index) sorted by descending score."""
    c = model.config.num_classes
    h, w = image.shape[:2]
    chw = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))
    with torch.no_grad():
        feats = model.extract_features(chw)
        pooled = model.pool_proposals(feats, boxes, include_img=False)
        scores = model.detection_forward(model.det_trunk(pooled.det))
        avg = torch.stack(scores.refine).mean(dim=0).numpy()    # (R, C+1)
        reg = scores.regressor.numpy()

    kept: list[tuple[np.ndarray, int, float, int]] = []
    argmax = np.argmax(avg, axis=1)
    for cat in range(c):
        rows = np.nonzero(argmax == cat)[0]
        if rows.size == 0:
            continue
        cat_scores = avg[rows, cat]
        ok = cat_scores >= score_floor
        rows, cat_scores = rows[ok], cat_scores[ok]
        if rows.size == 0:
            continue
        cat_boxes = []
        for r in rows:
            box = boxes[r]
            if apply_regression:
                offs = reg[r] if reg.shape[1] == 4 else reg[r, 4 * cat:4 * cat + 4]
                box = decode_offset(offs, box)
            cat_boxes.append(clip_box(box, w, h))
        cat_boxes = np.stack(cat_boxes)
        for k in nms(cat_boxes, cat_scores, nms_threshold):
            kept.append((cat_boxes[k], cat, float(cat_scores[k]), int(rows[k])))
    kept.sort(key=lambda d: -d[2])
    return kept


def ensemble_mask(cam_channel: np.ndarray, seg_channel: np.ndarray,
                  threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Binary mask from the average of the two map sources, strict >."""
    return ((cam_channel + seg_channel) / 2.0 > threshold).astype(np.uint8)


def paste_mask(mask_grid: np.ndarray, box: np.ndarray,
               image_shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor paste of a TxT binary grid into the box region of an
    all-zero image canvas."""
    h, w = image_shape
    t = mask_grid.shape[0]
    out = np.zeros((h, w), dtype=bool)
    x1, y1, x2, y2 = [float(v) for v in box]
    px1, py1 = max(int(np.floor(x1)), 0), max(int(np.floor(y1)), 0)
    px2, py2 = min(int(np.ceil(x2)), w), min(int(np.ceil(y2)), h)
    if px2 <= px1 or py2 <= py1 or x2 <= x1 or y2 <= y1:
        return out
    xs = np.arange(px1, px2) + 0.5
    ys = np.arange(py1, py2) + 0.5
    sx = np.clip(np.floor((xs - x1) / (x2 - x1) * t), 0, t - 1).astype(int)
    sy = np.clip(np.floor((ys - y1) / (y2 - y1) * t), 0, t - 1).astype(int)
    out[py1:py2, px1:px2] = mask_grid.astype(bool)[np.ix_(sy, sx)]
    return out


def snap_to_segment_proposal(mask: np.ndarray,
                             segment_proposals: list[np.ndarray] | None) -> np.ndarray:
    """Substitute the max-overlap segment proposal when one overlaps at all."""
    if not segment_proposals:
        return mask
    best_iou = 0.0
    best = None
    for seg in segment_proposals:
        v = mask_iou(mask, seg.astype(bool))
        if v > best_iou:
            best_iou = v
            best = seg
    if best is None:
        return mask
    return best.astype(bool)


def default_mask_source(train_config: dict | None) -> str:
    """Best available source given which heads were trained."""
    if train_config is None:
        return "ensemble"
    if not train_config.get("enable_img", True):
        return "box"
    if not train_config.get("enable_seg", True):
        return "cam"
    return "ensemble"


def predict_instances(model: WsisModel, image: np.ndarray, boxes: np.ndarray,
                      sources: tuple[str, ...] = ("ensemble",),
                      segment_proposals: list[np.ndarray] | None = None,
                      snap: bool = False, apply_regression: bool = True,
                      ) -> dict[str, list[InstancePrediction]]:
    """Full per-image inference for one or more mask sources in a single
    forward pass.  Returns {source: predictions sorted by score}."""
    for s in sources:
        if s not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {s!r}; choose from {MASK_SOURCES}")
    detections = detect(model, image, boxes, apply_regression=apply_regression)
    h, w = image.shape[:2]
    t = model.config.mask_size
    out: dict[str, list[InstancePrediction]] = {s: [] for s in sources}
    if not detections:
        return out

    need_maps = any(s in ("ensemble", "cam", "seg") for s in sources)
    cam_norm = seg_probs = None
    if need_maps:
        det_boxes = np.stack([d[0] for d in detections])
        chw = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1),
                                                    dtype=np.float32))
        with torch.no_grad():
            feats = model.extract_features(chw)
            pooled = model.pool_proposals(feats, det_boxes, include_img=True)
            cam = model.img_forward(pooled.img)
            seg_probs = model.seg_forward(model.det_trunk(pooled.det)).probs.numpy()
            cams_np = cam.cams.numpy()                       # (B, N, C+1, T, T)
        cam_norm = np.stack([
            np.mean([minmax_normalize(cams_np[k, i]) for k in range(cams_np.shape[0])], axis=0)
            for i in range(cams_np.shape[1])])               # (N, C+1, T, T)

    for i, (box, cat, score, pidx) in enumerate(detections):
        for source in sources:
            if source == "box":
                grid = np.ones((t, t), dtype=np.uint8)
            elif source == "cam":
                grid = (cam_norm[i, cat] > MASK_THRESHOLD).astype(np.uint8)
            elif source == "seg":
                grid = (seg_probs[i, cat] > MASK_THRESHOLD).astype(np.uint8)
            else:
                grid = ensemble_mask(cam_norm[i, cat], seg_probs[i, cat])
            full = paste_mask(grid, box, (h, w))
            if snap:
                full = snap_to_segment_proposal(full, segment_proposals)
            out[source].append(InstancePrediction(cat, score, box, full, grid, pidx))
    return out


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------

def write_predictions(per_image: list[tuple[str, list[InstancePrediction]]],
                      path: str | Path) -> None:
    with open(path, "w") as f:
        for image_id, preds in per_image:
            row = {"id": image_id, "instances": [{
                "category": int(p.category),
                "score": float(p.score),
                "box": [float(v) for v in p.box],
                "mask_rle": rle_encode(p.mask) if p.mask is not None else "",
            } for p in preds]}
            f.write(json.dumps(row) + "\n")


def load_predictions(path: str | Path) -> dict[str, list[dict]]:
    """predictions.jsonl -> {image id: [instance dict, ...]} with validation."""
    result: dict[str, list[dict]] = {}
    p = Path(path)
    with open(p) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{p}:{lineno}: invalid JSON: {exc}") from None
            if "id" not in row or "instances" not in row:
                raise ValueError(f"{p}:{lineno}: row missing 'id' or 'instances'")
            insts = []
            for k, inst in enumerate(row["instances"]):
                for field in ("category", "score", "box"):
                    if field not in inst:
                        raise ValueError(f"{p}:{lineno}: instance {k} missing '{field}'")
                box = np.asarray(inst["box"], dtype=np.float64)
                if box.shape != (4,):
                    raise ValueError(f"{p}:{lineno}: instance {k} box must have 4 numbers")
                insts.append({"category": int(inst["category"]),
                              "score": float(inst["score"]),
                              "box": box,
                              "mask_rle": inst.get("mask_rle", "")})
            result[str(row["id"])] = insts
    return result
