"""Rendering of evaluation reports: CSV tables and matplotlib figures.

Figures are written to files (Agg backend); nothing opens a display.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalmetrics import (EvalInstance, MetricsReport, average_precision,
                          match_predictions)

__all__ = [
    "write_metrics_csv",
    "render_metrics_figures",
    "render_training_curves",
]


def write_metrics_csv(report: MetricsReport, path: str | Path,
                      category_names: list[str] | None = None) -> None:
    """Per-category AP table plus summary rows, one line per (mode,
    threshold, category)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "iou_threshold", "category", "ap"])
        for mode, per_thr in report.ap.items():
            for thr, entry in per_thr.items():
                for cat, ap in entry["per_category"].items():
                    name = category_names[int(cat)] if category_names else cat
                    writer.writerow([mode, thr, name, "" if ap is None else f"{ap:.6f}"])
                writer.writerow([mode, thr, "mean", f"{entry['mean']:.6f}"])
        writer.writerow(["corloc", "", "", f"{report.corloc:.6f}"])
        writer.writerow(["abo", "", "", f"{report.abo:.6f}"])


def _pr_points(predictions: list[EvalInstance], gt_by_image: dict,
               num_gt: int, threshold: float, mode: str):
    preds = sorted(predictions, key=lambda p: -p.score)
    flags = match_predictions(preds, gt_by_image, threshold, mode)
    if len(flags) == 0 or num_gt == 0:
        return np.array([0.0]), np.array([1.0]), None
    tp = np.cumsum(flags.astype(float))
    fp = np.cumsum((~flags).astype(float))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    return recall, precision, average_precision(flags, num_gt)


def render_metrics_figures(report: MetricsReport,
                           predictions_by_image: dict[str, list[EvalInstance]],
                           gt_by_image: dict, num_classes: int,
                           out_dir: str | Path,
                           category_names: list[str] | None = None) -> list[Path]:
    """AP bar chart and PR curves (mask and box modes at IoU 0.5).
    Returns the written figure paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = category_names or [str(c) for c in range(num_classes)]
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    modes = list(report.ap)
    thresholds = sorted({t for m in modes for t in report.ap[m]}, key=float)
    width = 0.8 / max(len(modes) * len(thresholds), 1)
    ticks = np.arange(num_classes)
    slot = 0
    for mode in modes:
        for thr in thresholds:
            if thr not in report.ap[mode]:
                continue
            vals = [report.ap[mode][thr]["per_category"].get(str(c)) or 0.0
                    for c in range(num_classes)]
            ax.bar(ticks + slot * width, vals, width, label=f"{mode}@{thr}")
            slot += 1
    ax.set_xticks(ticks + 0.4 - width / 2)
    ax.set_xticklabels(names)
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("per-category average precision")
    fig.tight_layout()
    p = out / "ap_bars.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    all_preds = [p_ for preds in predictions_by_image.values() for p_ in preds]
    gt_counts = {c: sum(1 for gts in gt_by_image.values() for g in gts if g.category == c)
                 for c in range(num_classes)}
    fig, axes = plt.subplots(1, len(report.ap), figsize=(5 * len(report.ap), 4),
                             squeeze=False)
    for ax, mode in zip(axes[0], report.ap):
        for c in range(num_classes):
            cat_preds = [p_ for p_ in all_preds if p_.category == c]
            if mode == "mask" and any(p_.mask is None for p_ in cat_preds):
                continue
            recall, precision, ap = _pr_points(cat_preds, gt_by_image,
                                               gt_counts[c], 0.5, mode)
            label = f"{names[c]}" + (f" (AP {ap:.3f})" if ap is not None else "")
            ax.plot(recall, precision, label=label)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.0)
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{mode} PR @ IoU 0.5")
        ax.legend(fontsize=8)
    fig.tight_layout()
    p = out / "pr_curves.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)
    return written


def render_training_curves(log_path: str | Path, out_png: str | Path) -> Path:
    """Loss components over iterations from a JSONL training log."""
    records = []
    with open(log_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValueError(f"{log_path}: empty training log")
    its = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "lcls", "lreg", "limg", "lseg"):
        ax.plot(its, [r[key] for r in records], label=key)
    n_ref = len(records[0].get("lrefine", []))
    for k in range(n_ref):
        ax.plot(its, [r["lrefine"][k] for r in records], linestyle="--",
                label=f"lrefine{k + 1}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8, ncol=2)
    ax.set_title("training losses")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
