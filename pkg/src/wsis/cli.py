"""Command line interface: synth, train, infer, eval.

Exit codes: 0 success, 2 usage error, 3 validation error (bad inputs or
config), 4 runtime failure.  Every command writes a manifest.json recording
the effective arguments, a source revision string, and sha256 hashes of its
inputs and outputs, so runs are reproducible and auditable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4


class ValidationError(ValueError):
    pass


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_revision() -> str:
    """Deterministic digest of the installed package sources."""
    pkg_dir = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(pkg_dir.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, args: dict,
                    inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v)
                 for k, v in args.items() if not callable(v)},
        "source_revision": source_revision(),
        "inputs": {str(p): _sha256_file(p) for p in inputs if p.is_file()},
        "outputs": {str(p): _sha256_file(p) for p in outputs if p.is_file()},
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _cmd_synth(args: argparse.Namespace) -> int:
    from . import synthdata as sd
    from .geometry import iou_matrix

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"output directory {out} is not empty (use --force to overwrite)")
    config = sd.SynthConfig(num_classes=args.classes, image_size=args.image_size)
    config.validate()
    samples = sd.generate_dataset(config, seed=args.seed, num_images=args.num_images)
    sd.write_dataset(samples, out, num_classes=args.classes)
    outputs = [out / "labels.jsonl", out / "gt.jsonl", out / "meta.json"]

    if args.proposals:
        pconf = sd.ProposalConfig(max_proposals=args.max_proposals)
        records = [sd.generate_proposals(s, pconf, seed=args.seed) for s in samples]
        sd.write_proposals(records, out / "proposals.jsonl")
        outputs.append(out / "proposals.jsonl")
        hits = total = 0
        counts = []
        with sd.evaluation_access():
            for s, rec in zip(samples, records):
                counts.append(rec.boxes.shape[0])
                for gt in s.ground_truth:
                    total += 1
                    if iou_matrix(gt.box[None], rec.boxes).max() > 0.5:
                        hits += 1
        print(f"proposals per image: min {min(counts)} max {max(counts)} "
              f"mean {sum(counts) / len(counts):.1f}")
        print(f"proposal recall@0.5: {hits}/{total} = {hits / total:.4f}")

    _write_manifest(out, "synth", vars(args), [], outputs)
    print(f"wrote {len(samples)} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _cmd_train(args: argparse.Namespace) -> int:
    from . import synthdata as sd
    from .report import render_training_curves
    from .trainer import TrainConfig, Trainer

    data_dir = Path(args.data)
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.ablation:
        config = config.with_preset(args.ablation)
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    config.validate()

    samples = sd.load_dataset(data_dir, num_classes=config.num_classes)
    proposals_path = Path(args.proposals) if args.proposals else data_dir / "proposals.jsonl"
    proposals = sd.load_proposals(proposals_path,
                                  image_shape=samples[0].image.shape[:2])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.resume(args.resume, samples, proposals)
    else:
        trainer = Trainer(samples, proposals, config)
    final = trainer.run(out, quiet=args.quiet)
    render_training_curves(out / "train_log.jsonl", out / "loss_curves.png")

    _write_manifest(out, "train", vars(args),
                    [data_dir / "labels.jsonl", proposals_path],
                    [final, out / "config.json", out / "train_log.jsonl",
                     out / "loss_curves.png"])
    print(f"final checkpoint: {final}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _cmd_infer(args: argparse.Namespace) -> int:
    from . import synthdata as sd
    from .inference import default_mask_source, predict_instances, write_predictions
    from .netcore import build_model_from_checkpoint

    model, _extra_arrays, extra = build_model_from_checkpoint(args.checkpoint)
    model.eval()
    train_config = extra.get("train_config")
    source = args.mask_source
    if source == "auto":
        source = default_mask_source(train_config)
    apply_reg = True if train_config is None else bool(train_config.get("enable_reg", True))

    data_dir = Path(args.data)
    samples = sd.load_dataset(data_dir, num_classes=model.config.num_classes)
    proposals_path = Path(args.proposals) if args.proposals else data_dir / "proposals.jsonl"
    shape = samples[0].image.shape[:2]
    proposals = sd.load_proposals(proposals_path, image_shape=shape)

    missing = [s.image_id for s in samples if s.image_id not in proposals]
    if missing:
        raise ValidationError(f"proposals missing for image ids: {missing[:5]}"
                              f"{'...' if len(missing) > 5 else ''}")

    rows = []
    for s in samples:
        rec = proposals[s.image_id]
        preds = predict_instances(
            model, s.image, rec.boxes, sources=(source,),
            segment_proposals=rec.segments if args.snap else None,
            snap=args.snap, apply_regression=apply_reg)
        rows.append((s.image_id, preds[source]))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(rows, out_path)

    _write_manifest(out_path.parent, "infer", vars(args),
                    [Path(args.checkpoint), proposals_path], [out_path])
    n = sum(len(r[1]) for r in rows)
    print(f"wrote {n} instances over {len(rows)} images to {out_path} "
          f"(mask source: {source})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _cmd_eval(args: argparse.Namespace) -> int:
    from . import synthdata as sd
    from .evalmetrics import evaluate, predictions_from_file_rows
    from .inference import load_predictions
    from .report import render_metrics_figures, write_metrics_csv

    gt_dir = Path(args.gt)
    samples = sd.load_dataset(gt_dir)
    if not any(s.has_ground_truth for s in samples):
        raise ValidationError(f"{gt_dir}: no gt.jsonl found; evaluation requires ground truth")
    with sd.evaluation_access():
        gt_by_image = {s.image_id: s.ground_truth for s in samples}
    num_classes = max(max((g.category for g in gts), default=0)
                      for gts in gt_by_image.values()) + 1
    meta_path = gt_dir / "meta.json"
    if meta_path.exists():
        num_classes = int(json.load(open(meta_path))["num_classes"])

    rows = load_predictions(args.pred)
    missing_pred = sorted(set(gt_by_image) - set(rows))
    missing_gt = sorted(set(rows) - set(gt_by_image))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append(f"ids missing from predictions: {missing_pred[:10]}")
        if missing_gt:
            parts.append(f"prediction ids missing from ground truth: {missing_gt[:10]}")
        raise ValidationError("prediction/ground-truth id mismatch; " + "; ".join(parts))

    shape = samples[0].image.shape[:2]
    thresholds = tuple(float(t) for t in args.iou.split(","))
    preds = predictions_from_file_rows(rows, shape, with_masks=(args.mode == "mask"))
    report = evaluate(preds, gt_by_image, num_classes,
                      iou_thresholds=thresholds, modes=(args.mode,))

    out_dir = Path(args.out) if args.out else Path(args.pred).parent / "metrics"
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "metrics.json")
    write_metrics_csv(report, out_dir / "metrics.csv")
    figures = render_metrics_figures(report, preds, gt_by_image, num_classes, out_dir)
    _write_manifest(out_dir, "eval", vars(args), [Path(args.pred)],
                    [out_dir / "metrics.json", out_dir / "metrics.csv", *figures])

    for thr in thresholds:
        print(f"{args.mode} mAP@{thr:g}: {report.mean_ap(args.mode, thr):.4f}")
    print(f"corloc: {report.corloc:.4f}")
    if args.mode == "mask":
        print(f"abo: {report.abo:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsis",
        description="weakly supervised instance segmentation on synthetic shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, required=True)
    p.add_argument("--classes", type=int, choices=(2, 3, 4, 5), default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--proposals", action="store_true",
                   help="also generate proposals.jsonl and print recall stats")
    p.add_argument("--max-proposals", type=int, default=64)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON train config (defaults apply when omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=("detector", "det+img", "det+img+is", "full"))
    p.add_argument("--proposals", help="proposals file (default: DATA/proposals.jsonl)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="write instance predictions for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--proposals", help="proposals file (default: DATA/proposals.jsonl)")
    p.add_argument("--mask-source", choices=("auto", "ensemble", "cam", "seg", "box"),
                   default="auto")
    p.add_argument("--snap", action="store_true",
                   help="substitute masks by best-overlap segment proposals")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("mask", "box"), default="mask")
    p.add_argument("--iou", default="0.25,0.5,0.75", help="comma-separated IoU thresholds")
    p.add_argument("--out", help="report directory (default: metrics/ beside predictions)")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 4
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
