"""Pseudo-label construction between forward passes.

Everything here is plain numpy on detached score arrays, so no gradient can
flow from the losses back through the labeling path: targets are constants.

Conventions: categories are 0..C-1, background is index C (the last channel
of any (C+1)-wide tensor).  All tie-breaks resolve to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import encode_offset, iou_matrix, nms

__all__ = [
    "Seed",
    "RefineTargets",
    "RegressionTargets",
    "select_seeds",
    "assign_refine_targets",
    "sample_detection_proposals",
    "pair_regression_targets",
    "minmax_normalize",
    "build_pseudo_mask",
]


@dataclass
class Seed:
    category: int
    proposal_index: int
    score: float
    box: np.ndarray


@dataclass
class RefineTargets:
    labels: np.ndarray    # (R,) int in 0..C, background == C
    weights: np.ndarray   # (R,) float in [0, 1]

    def one_hot(self, num_classes: int) -> np.ndarray:
        r = self.labels.shape[0]
        out = np.zeros((r, num_classes + 1), dtype=np.float64)
        out[np.arange(r), self.labels] = 1.0
        return out


@dataclass
class RegressionTargets:
    matched: np.ndarray     # (R,) bool, at most one pseudo-GT per proposal
    offsets: np.ndarray     # (R, 4) encoded targets, zero rows where unmatched
    gt_index: np.ndarray    # (R,) int, -1 where unmatched
    gt_boxes: np.ndarray    # (G, 4)
    gt_categories: np.ndarray  # (G,)


def select_seeds(scores: np.ndarray, image_labels: np.ndarray,
                 boxes: np.ndarray) -> list[Seed]:
    """Top-scoring proposal per present category.

    ``scores`` may have C or C+1 columns; only the first C (foreground)
    columns are consulted.  Ties go to the lowest proposal index.
    """
    seeds = []
    for c in np.nonzero(image_labels)[0]:
        col = scores[:, c]
        idx = int(np.argmax(col))
        seeds.append(Seed(int(c), idx, float(col[idx]), boxes[idx]))
    return seeds


def assign_refine_targets(seeds: list[Seed], boxes: np.ndarray,
                          num_classes: int) -> RefineTargets:
    """Label every proposal from the seed set.

    A proposal inherits the category of its max-overlap seed when that IoU
    exceeds 0.5, otherwise background.  Its weight is that seed's score;
    proposals overlapping no seed at all keep weight 1.0, as does everything
    when there are no seeds.
    """
    r = boxes.shape[0]
    labels = np.full(r, num_classes, dtype=np.int64)
    weights = np.ones(r, dtype=np.float64)
    if not seeds:
        return RefineTargets(labels, weights)
    seed_boxes = np.stack([s.box for s in seeds])
    ious = iou_matrix(boxes, seed_boxes)          # (R, S)
    best = np.argmax(ious, axis=1)                # ties -> lowest seed index
    best_iou = ious[np.arange(r), best]
    for i in range(r):
        if best_iou[i] <= 0.0:
            continue
        s = seeds[best[i]]
        weights[i] = s.score
        if best_iou[i] > 0.5:
            labels[i] = s.category
    return RefineTargets(labels, weights)


def sample_detection_proposals(scores: np.ndarray, boxes: np.ndarray,
                               image_labels: np.ndarray, rng: np.random.Generator,
                               top_per_category: int = 32, fg_nms_threshold: float = 0.3,
                               bg_count: int = 8, bg_iou_max: float = 0.3,
                               fg_score_floor: float = 0.0, bg_fg_ratio: int = 3,
                               proposal_labels: np.ndarray | None = None,
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Pick the proposal subset that mask heads train on.

    Foreground: per present category, the top ``top_per_category`` proposals
    scoring above ``fg_score_floor``, reduced by NMS.  Background: up to
    ``min(bg_count, bg_fg_ratio * |fg|)`` proposals drawn at random among
    those overlapping every foreground box below ``bg_iou_max`` and covering
    at most half of any foreground box (a window that swallows an object is
    not background).  No foreground means no background either: sampling
    against unconfident detections would mark object regions as background.
    When ``proposal_labels`` (the refinement-target label per proposal,
    background = scores.shape[1]) is given, foreground picks must carry the
    matching category label and background picks must carry the background
    label, so the mask heads never see a proposal whose sampled role
    contradicts its supervision.  Returns (foreground indices, background
    indices), both sorted ascending and disjoint.
    """
    num_fg = scores.shape[1]
    fg: set[int] = set()
    for c in np.nonzero(image_labels)[0]:
        col = scores[:, c]
        order = np.argsort(-col, kind="stable")[:top_per_category]
        order = order[col[order] > fg_score_floor]
        if proposal_labels is not None:
            order = order[proposal_labels[order] == c]
        if order.size == 0:
            continue
        keep = nms(boxes[order], col[order], fg_nms_threshold)
        fg.update(int(order[k]) for k in keep)
    fg_idx = np.array(sorted(fg), dtype=np.int64)
    if fg_idx.size == 0:
        return fg_idx, np.empty(0, dtype=np.int64)

    candidates = np.setdiff1d(np.arange(boxes.shape[0]), fg_idx)
    if candidates.size and proposal_labels is not None:
        candidates = candidates[proposal_labels[candidates] == num_fg]
    if candidates.size:
        a = boxes[candidates]
        b = boxes[fg_idx]
        iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                     - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
        ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                     - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
        inter = iw * ih
        fg_area = np.maximum((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]), 1e-12)
        covered = (inter / fg_area[None, :]).max(axis=1)
        overlap = iou_matrix(a, b).max(axis=1)
        candidates = candidates[(overlap < bg_iou_max) & (covered <= 0.5)]
    limit = min(bg_count, bg_fg_ratio * fg_idx.size)
    if candidates.size > limit:
        candidates = candidates[rng.choice(candidates.size, size=limit, replace=False)]
    return fg_idx, np.sort(candidates).astype(np.int64)


def pair_regression_targets(boxes: np.ndarray, gt_boxes: np.ndarray,
                            gt_categories: np.ndarray,
                            iou_threshold: float = 0.6) -> RegressionTargets:
    """Match each proposal to its nearest pseudo-ground-truth box.

    A proposal pairs with its max-IoU pseudo-GT only when that IoU exceeds
    ``iou_threshold``; nearest-GT ties resolve to the lower GT index.
    """
    r = boxes.shape[0]
    matched = np.zeros(r, dtype=bool)
    offsets = np.zeros((r, 4), dtype=np.float64)
    gt_index = np.full(r, -1, dtype=np.int64)
    if gt_boxes.shape[0] > 0:
        ious = iou_matrix(boxes, gt_boxes)
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(r), best]
        for i in range(r):
            if best_iou[i] > iou_threshold:
                matched[i] = True
                gt_index[i] = best[i]
                offsets[i] = encode_offset(boxes[i], gt_boxes[best[i]])
    return RegressionTargets(matched, offsets, gt_index,
                             np.asarray(gt_boxes, dtype=np.float64),
                             np.asarray(gt_categories, dtype=np.int64))


def minmax_normalize(cam: np.ndarray) -> np.ndarray:
    """Scale one activation stack to [0, 1] over all its entries jointly;
    a constant stack maps to all zeros."""
    lo = cam.min()
    hi = cam.max()
    if hi <= lo:
        return np.zeros_like(cam, dtype=np.float64)
    return (cam.astype(np.float64) - lo) / (hi - lo)


def build_pseudo_mask(cams: np.ndarray, threshold: float = 0.4) -> np.ndarray:
    """Binary (C+1, T, T) target mask from a (B, C+1, T, T) activation stack.

    Each branch map is min-max normalized over its joint (C+1)xTxT extent,
    the branches are averaged, and the average is thresholded strictly.
    """
    cams = np.asarray(cams)
    if cams.ndim != 4:
        raise ValueError(f"expected (branches, C+1, T, T) stack, got shape {cams.shape}")
    avg = np.mean([minmax_normalize(cams[k]) for k in range(cams.shape[0])], axis=0)
    return (avg > threshold).astype(np.uint8)
