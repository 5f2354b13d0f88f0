"""Evaluation metrics: AP at multiple IoU thresholds, CorLoc, and ABO.

Matching is the detection standard: predictions sweep in descending score
order and greedily claim the highest-IoU unmatched ground truth of the same
category in their image; a prediction is a true positive when that IoU
strictly exceeds the threshold.  AP uses all-point interpolation (the area
under the precision envelope).  Categories with no ground truth are
excluded from means rather than scored zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import iou as box_iou
from .masks import mask_iou, rle_decode
from .synthdata import GroundTruthInstance

__all__ = [
    "EvalInstance",
    "MetricsReport",
    "match_predictions",
    "average_precision",
    "corloc",
    "abo",
    "evaluate",
]


@dataclass
class EvalInstance:
    """One prediction in evaluation form."""
    image_id: str
    category: int
    score: float
    box: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class MetricsReport:
    num_images: int
    num_gt: int
    num_predictions: int
    # mode -> {threshold: {"per_category": {cat: AP or None}, "mean": float}}
    ap: dict = field(default_factory=dict)
    corloc: float = 0.0
    abo: float = 0.0

    def to_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_predictions": self.num_predictions,
            "ap": self.ap,
            "corloc": self.corloc,
            "abo": self.abo,
        }

    def save_json(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def mean_ap(self, mode: str, threshold: float) -> float:
        return self.ap[mode][_thr_key(threshold)]["mean"]


def _thr_key(threshold: float) -> str:
    return f"{threshold:g}"


def _pair_iou(pred: EvalInstance, gt: GroundTruthInstance, mode: str) -> float:
    if mode == "box":
        return box_iou(pred.box, gt.box)
    if pred.mask is None:
        raise ValueError("mask mode requires prediction masks")
    return mask_iou(pred.mask, gt.mask)


def match_predictions(predictions: list[EvalInstance],
                      gt_by_image: dict[str, list[GroundTruthInstance]],
                      iou_threshold: float, mode: str) -> np.ndarray:
    """TP/FP flags for predictions of ONE category, already sorted by
    descending score.  Each GT is claimed at most once."""
    claimed: dict[str, set[int]] = {}
    flags = np.zeros(len(predictions), dtype=bool)
    for i, pred in enumerate(predictions):
        gts = gt_by_image.get(pred.image_id, [])
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if gt.category != pred.category or j in claimed.get(pred.image_id, set()):
                continue
            v = _pair_iou(pred, gt, mode)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou > iou_threshold:
            flags[i] = True
            claimed.setdefault(pred.image_id, set()).add(best_j)
    return flags


def average_precision(tp_flags: np.ndarray, num_gt: int) -> float | None:
    """All-point interpolated AP; None when the category has no ground truth
    (excluded from means)."""
    if num_gt == 0:
        return None
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags.astype(np.float64))
    fp = np.cumsum((~tp_flags).astype(np.float64))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def corloc(predictions_by_image: dict[str, list[EvalInstance]],
           gt_by_image: dict[str, list[GroundTruthInstance]],
           iou_threshold: float = 0.5) -> float:
    """Fraction of (image, present category) pairs whose top-scoring
    detection of that category overlaps some GT box of it (box IoU,
    strict >)."""
    total = 0
    correct = 0
    for image_id, gts in gt_by_image.items():
        present = sorted({g.category for g in gts})
        preds = predictions_by_image.get(image_id, [])
        for cat in present:
            total += 1
            cat_preds = [p for p in preds if p.category == cat]
            if not cat_preds:
                continue
            top = max(cat_preds, key=lambda p: p.score)
            if any(box_iou(top.box, g.box) > iou_threshold
                   for g in gts if g.category == cat):
                correct += 1
    return correct / total if total else 0.0


def abo(predictions_by_image: dict[str, list[EvalInstance]],
        gt_by_image: dict[str, list[GroundTruthInstance]]) -> float:
    """Average best overlap: per category, the mean over GT instances of the
    best mask IoU achieved by any same-category prediction in the image;
    then the mean over categories that have ground truth."""
    per_cat: dict[int, list[float]] = {}
    for image_id, gts in gt_by_image.items():
        preds = predictions_by_image.get(image_id, [])
        for gt in gts:
            best = 0.0
            for p in preds:
                if p.category != gt.category or p.mask is None:
                    continue
                best = max(best, mask_iou(p.mask, gt.mask))
            per_cat.setdefault(gt.category, []).append(best)
    if not per_cat:
        return 0.0
    return float(np.mean([np.mean(v) for v in per_cat.values()]))


def evaluate(predictions_by_image: dict[str, list[EvalInstance]],
             gt_by_image: dict[str, list[GroundTruthInstance]],
             num_classes: int,
             iou_thresholds: tuple[float, ...] = (0.25, 0.5, 0.75),
             modes: tuple[str, ...] = ("mask", "box")) -> MetricsReport:
    """Full metric sweep.  Predictions may include images absent from the GT
    mapping only if they carry no instances; missing prediction rows for GT
    images count as no detections."""
    unknown = [i for i, preds in predictions_by_image.items()
               if preds and i not in gt_by_image]
    if unknown:
        raise ValueError(f"predictions reference {len(unknown)} unknown image id(s): "
                         f"{sorted(unknown)[:5]}")

    all_preds = [p for preds in predictions_by_image.values() for p in preds]
    num_gt_total = sum(len(g) for g in gt_by_image.values())
    gt_count_per_cat = {c: 0 for c in range(num_classes)}
    for gts in gt_by_image.values():
        for g in gts:
            gt_count_per_cat[g.category] += 1

    report = MetricsReport(num_images=len(gt_by_image), num_gt=num_gt_total,
                           num_predictions=len(all_preds))
    for mode in modes:
        report.ap[mode] = {}
        for thr in iou_thresholds:
            per_cat: dict[str, float | None] = {}
            vals = []
            for cat in range(num_classes):
                cat_preds = [p for p in all_preds if p.category == cat]
                cat_preds.sort(key=lambda p: -p.score)
                flags = match_predictions(cat_preds, gt_by_image, thr, mode)
                ap = average_precision(flags, gt_count_per_cat[cat])
                per_cat[str(cat)] = ap
                if ap is not None:
                    vals.append(ap)
            report.ap[mode][_thr_key(thr)] = {
                "per_category": per_cat,
                "mean": float(np.mean(vals)) if vals else 0.0,
            }
    report.corloc = corloc(predictions_by_image, gt_by_image)
    if "mask" in modes:
        report.abo = abo(predictions_by_image, gt_by_image)
    return report


def predictions_from_file_rows(rows: dict[str, list[dict]],
                               image_shape: tuple[int, int],
                               with_masks: bool = True) -> dict[str, list[EvalInstance]]:
    """Convert loaded prediction-file rows into EvalInstance lists."""
    out: dict[str, list[EvalInstance]] = {}
    for image_id, insts in rows.items():
        lst = []
        for inst in insts:
            mask = None
            if with_masks and inst.get("mask_rle"):
                mask = rle_decode(inst["mask_rle"], image_shape)
            lst.append(EvalInstance(image_id, inst["category"], inst["score"],
                                    inst["box"], mask))
        out[image_id] = lst
    return out
