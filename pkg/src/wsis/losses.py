"""Training objectives for all heads.

All functions take torch tensors for predictions and numpy arrays (or plain
tensors without grad) for targets, and return 0-dim torch tensors.  Logs are
clamped with eps = 1e-7, so every loss is finite and nonnegative for any
input in domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .pseudolabel import RefineTargets, RegressionTargets

__all__ = [
    "EPS",
    "LossBreakdown",
    "classification_loss",
    "refinement_loss",
    "refinement_loss_logits",
    "regression_loss",
    "cam_loss",
    "cam_loss_logits",
    "segmentation_loss",
    "segmentation_loss_logits",
    "total_loss",
]

EPS = 1e-7


@dataclass
class LossBreakdown:
    lcls: torch.Tensor
    lreg: torch.Tensor
    lrefine: list[torch.Tensor]
    limg: torch.Tensor
    lseg: torch.Tensor
    total: torch.Tensor

    def to_floats(self) -> dict:
        return {
            "lcls": float(self.lcls.detach()),
            "lreg": float(self.lreg.detach()),
            "lrefine": [float(v.detach()) for v in self.lrefine],
            "limg": float(self.limg.detach()),
            "lseg": float(self.lseg.detach()),
            "total": float(self.total.detach()),
        }


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def classification_loss(phi: torch.Tensor, y: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Binary cross entropy between image score vector phi and the image's
    binary label vector, summed over categories."""
    y = torch.as_tensor(np.asarray(y), dtype=phi.dtype)
    p = _clamp(phi)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).sum()


def refinement_loss(x: torch.Tensor, targets: RefineTargets) -> torch.Tensor:
    """Weighted cross entropy over proposals, averaged by proposal count:
    -(1/R) sum_r w_r log x[r, label_r]."""
    r = x.shape[0]
    labels = torch.as_tensor(targets.labels, dtype=torch.long)
    weights = torch.as_tensor(targets.weights, dtype=x.dtype)
    picked = _clamp(x[torch.arange(r), labels])
    return -(weights * torch.log(picked)).sum() / r


def refinement_loss_logits(logits: torch.Tensor, targets: RefineTargets) -> torch.Tensor:
    """Same formula as refinement_loss computed from pre-softmax scores via
    log-softmax, so the gradient survives saturated rows (training path)."""
    r = logits.shape[0]
    labels = torch.as_tensor(targets.labels, dtype=torch.long)
    weights = torch.as_tensor(targets.weights, dtype=logits.dtype)
    picked = torch.log_softmax(logits, dim=1)[torch.arange(r), labels]
    return -(weights * picked).sum() / r


def _smooth_l1(d: torch.Tensor) -> torch.Tensor:
    a = d.abs()
    return torch.where(a < 1.0, 0.5 * d * d, a - 0.5)


def regression_loss(v: torch.Tensor, targets: RegressionTargets,
                    num_classes: int | None = None) -> torch.Tensor:
    """Smooth-L1 between predicted offsets and matched pseudo-GT offsets,
    summed over matched proposals, divided by the total proposal count.

    ``v`` is (R, 4) for the class-agnostic regressor or (R, 4C) for the
    class-specific variant, in which case the matched pseudo-GT's category
    selects the 4-column slice.
    """
    r = v.shape[0]
    if not targets.matched.any():
        return (v * 0.0).sum()
    idx = np.nonzero(targets.matched)[0]
    t = torch.as_tensor(targets.offsets[idx], dtype=v.dtype)
    if v.shape[1] == 4:
        pred = v[idx]
    else:
        if num_classes is None:
            raise ValueError("num_classes required for class-specific regression output")
        cats = targets.gt_categories[targets.gt_index[idx]]
        cols = np.stack([4 * cats + k for k in range(4)], axis=1)
        pred = v[torch.as_tensor(idx)[:, None], torch.as_tensor(cols)]
    return _smooth_l1(t - pred).sum() / r


def cam_loss(probs: torch.Tensor, y_onehot: np.ndarray) -> torch.Tensor:
    """Binary cross entropy between one branch's GAP category scores and the
    one-hot pseudo labels, summed over channels, averaged over proposals."""
    r = probs.shape[0]
    y = torch.as_tensor(y_onehot, dtype=probs.dtype)
    p = _clamp(probs)
    bce = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).sum()
    return bce / r


def cam_loss_logits(scores: torch.Tensor, y_onehot: np.ndarray) -> torch.Tensor:
    """cam_loss computed from pre-softmax GAP scores: the y log p term goes
    through log-softmax so saturated rows keep a gradient (training path)."""
    r = scores.shape[0]
    y = torch.as_tensor(y_onehot, dtype=scores.dtype)
    logp = torch.log_softmax(scores, dim=1)
    p = torch.softmax(scores, dim=1)
    neg = torch.log((1.0 - p).clamp(EPS, 1.0))
    return -(y * logp + (1.0 - y) * neg).sum() / r


def segmentation_loss(s: torch.Tensor, pseudo_masks: np.ndarray,
                      labeled_categories: np.ndarray, num_classes: int) -> torch.Tensor:
    """Pixel-wise binary cross entropy against pseudo masks, normalized by
    the pixel count T*T only.

    Per proposal, only the labeled category channel and the background
    channel contribute (just background for background-labeled proposals).
    """
    n, _, t, _ = s.shape
    sel = _channel_select(labeled_categories, n, num_classes, s.dtype)
    m = torch.as_tensor(np.asarray(pseudo_masks), dtype=s.dtype)
    p = _clamp(s)
    bce = -(m * torch.log(p) + (1.0 - m) * torch.log(1.0 - p))
    return (bce * sel).sum() / (t * t)


def _channel_select(labeled_categories: np.ndarray, n: int, num_classes: int,
                    dtype: torch.dtype) -> torch.Tensor:
    cats = np.asarray(labeled_categories, dtype=np.int64)
    select = np.zeros((n, num_classes + 1), dtype=np.float64)
    select[np.arange(n), cats] = 1.0
    select[:, num_classes] = 1.0
    return torch.as_tensor(select, dtype=dtype)[:, :, None, None]


def segmentation_loss_logits(logits: torch.Tensor, pseudo_masks: np.ndarray,
                             labeled_categories: np.ndarray, num_classes: int) -> torch.Tensor:
    """segmentation_loss computed from pre-sigmoid maps so saturated pixels
    keep a gradient (training path)."""
    n, _, t, _ = logits.shape
    sel = _channel_select(labeled_categories, n, num_classes, logits.dtype)
    m = torch.as_tensor(np.asarray(pseudo_masks), dtype=logits.dtype)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, m, reduction="none")
    return (bce * sel).sum() / (t * t)


def total_loss(lcls: torch.Tensor, lreg: torch.Tensor, lrefine: list[torch.Tensor],
               limg: torch.Tensor, lseg: torch.Tensor) -> LossBreakdown:
    """Unweighted sum of all terms; the breakdown is kept for logging and
    satisfies total == lcls + lreg + sum(lrefine) + limg + lseg exactly
    (same summation order)."""
    total = lcls + lreg
    for lr in lrefine:
        total = total + lr
    total = total + limg + lseg
    return LossBreakdown(lcls, lreg, list(lrefine), limg, lseg, total)
