"""Joint training of all heads from image-level labels.

One step: forward the detection path over every proposal of each batch
image, derive refinement/regression/mask pseudo-targets on detached scores,
forward the mask heads on a sampled proposal subset, sum the losses, and
apply one momentum-SGD update (weight decay on weight matrices only).

Determinism contract: given (config, dataset, proposals), parameter
trajectories are bit-identical across runs, and resuming from a checkpoint
continues exactly the uninterrupted trajectory.  All randomness flows from
one seeded numpy generator whose state rides along in checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as losses_mod
from . import pseudolabel as pl
from .netcore import NetConfig, WsisModel, load_checkpoint, save_checkpoint
from .synthdata import ProposalRecord, SampleRecord

__all__ = ["TrainConfig", "TrainingDiverged", "Trainer", "ABLATION_PRESETS"]

# named head combinations, from bare detector to the full community loop
ABLATION_PRESETS = {
    "detector": {"enable_img": False, "enable_seg": False, "enable_reg": False},
    "det+img": {"enable_img": True, "enable_seg": False, "enable_reg": False},
    "det+img+is": {"enable_img": True, "enable_seg": True, "enable_reg": False},
    "full": {"enable_img": True, "enable_seg": True, "enable_reg": True},
}


@dataclass
class TrainConfig:
    num_classes: int = 3
    image_size: int = 64
    iterations: int = 5000
    batch_size: int = 2
    lr: float = 0.01
    lr_drop_iteration: int = 3750
    lr_drop_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0
    enable_img: bool = True
    enable_seg: bool = True
    enable_reg: bool = True
    reg_class_agnostic: bool = True
    mask_size: int = 28
    refine_branches: int = 3
    cam_branches: int = 3
    fg_top_per_category: int = 32
    fg_nms_threshold: float = 0.3
    # mask heads train only on detections the refinement branches already
    # trust; until scores clear the floor limg and lseg stay at zero
    fg_score_floor: float = 0.5
    # segmentation trains only on proposals whose activation maps already
    # classify the pseudo label confidently; before that the thresholded
    # maps are amplified noise, not masks
    cam_score_floor: float = 0.5
    bg_count: int = 8
    bg_iou_max: float = 0.3
    mask_proposal_cap: int = 16
    max_train_proposals: int = 64
    grad_clip_norm: float = 10.0
    flip_augment: bool = False
    checkpoint_every: int = 1000
    log_every: int = 50

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 <= self.lr_drop_iteration < self.iterations:
            raise ValueError("need 0 <= lr_drop_iteration < iterations")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.cam_branches not in (1, 2, 3, 4):
            raise ValueError(f"cam_branches must be 1..4, got {self.cam_branches}")
        if self.enable_seg and not self.enable_img:
            raise ValueError("enable_seg requires enable_img (pseudo masks come from the CAM stack)")
        if self.mask_proposal_cap < 1 or self.max_train_proposals < 1:
            raise ValueError("proposal caps must be >= 1")
        if self.grad_clip_norm < 0:
            raise ValueError(f"grad_clip_norm must be >= 0 (0 disables), got {self.grad_clip_norm}")
        if not 0.0 <= self.fg_score_floor < 1.0:
            raise ValueError(f"fg_score_floor must be in [0, 1), got {self.fg_score_floor}")
        if not 0.0 <= self.cam_score_floor < 1.0:
            raise ValueError(f"cam_score_floor must be in [0, 1), got {self.cam_score_floor}")

    def net_config(self) -> NetConfig:
        return NetConfig(
            num_classes=self.num_classes,
            mask_size=self.mask_size,
            refine_branches=self.refine_branches,
            cam_branches=self.cam_branches,
            reg_class_agnostic=self.reg_class_agnostic,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_json(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def with_preset(self, name: str) -> "TrainConfig":
        if name not in ABLATION_PRESETS:
            raise ValueError(f"unknown ablation preset {name!r}; "
                             f"choose from {sorted(ABLATION_PRESETS)}")
        cfg = replace(self, **ABLATION_PRESETS[name])
        cfg.validate()
        return cfg


class TrainingDiverged(RuntimeError):
    """A non-finite loss was produced; a diagnostic snapshot was written."""


@dataclass
class _Item:
    image_id: str
    chw: np.ndarray       # (3, H, W) float32
    labels: np.ndarray    # (C,) int8
    boxes: np.ndarray     # (R, 4) float64, already capped and clipped


def _prepare_items(samples: list[SampleRecord], proposals: dict[str, ProposalRecord],
                   config: TrainConfig) -> list[_Item]:
    items = []
    missing = [s.image_id for s in samples if s.image_id not in proposals]
    if missing:
        raise ValueError(f"proposals missing for {len(missing)} image(s): "
                         f"{missing[:5]}{'...' if len(missing) > 5 else ''}")
    for s in samples:
        h, w = s.image.shape[:2]
        if h != config.image_size or w != config.image_size:
            raise ValueError(f"image {s.image_id}: size {w}x{h} != config image_size "
                             f"{config.image_size}")
        if s.image_labels.shape[0] != config.num_classes:
            raise ValueError(f"image {s.image_id}: label vector length "
                             f"{s.image_labels.shape[0]} != num_classes {config.num_classes}")
        # cap keeps file order: proposal files list high-priority boxes first
        boxes = np.array(proposals[s.image_id].boxes[:config.max_train_proposals],
                         dtype=np.float64)
        boxes[:, 0] = np.clip(boxes[:, 0], 0, w - 1)
        boxes[:, 1] = np.clip(boxes[:, 1], 0, h - 1)
        boxes[:, 2] = np.clip(boxes[:, 2], boxes[:, 0] + 1e-3, w)
        boxes[:, 3] = np.clip(boxes[:, 3], boxes[:, 1] + 1e-3, h)
        chw = np.ascontiguousarray(s.image.transpose(2, 0, 1), dtype=np.float32)
        items.append(_Item(s.image_id, chw, s.image_labels.copy(), boxes))
    return items


def _flip_item(item: _Item, width: int) -> tuple[np.ndarray, np.ndarray]:
    chw = np.ascontiguousarray(item.chw[:, :, ::-1])
    b = item.boxes
    boxes = np.stack([width - b[:, 2], b[:, 1], width - b[:, 0], b[:, 3]], axis=1)
    return chw, boxes


class Trainer:
    def __init__(self, samples: list[SampleRecord], proposals: dict[str, ProposalRecord],
                 config: TrainConfig, model: WsisModel | None = None):
        torch.set_num_threads(1)
        config.validate()
        self.config = config
        self.items = _prepare_items(samples, proposals, config)
        if not self.items:
            raise ValueError("empty training set")
        self.model = model if model is not None else WsisModel(config.net_config(),
                                                               init_seed=config.seed)
        self.rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed,
                                                                spawn_key=(100,)))
        self.momentum: dict[str, torch.Tensor] = {}
        self.iteration = 0

    # ------------------------------------------------------------------
    def current_lr(self) -> float:
        lr = self.config.lr
        if self.iteration >= self.config.lr_drop_iteration:
            lr *= self.config.lr_drop_factor
        return lr

    def _image_loss(self, chw: np.ndarray, labels: np.ndarray,
                    boxes: np.ndarray) -> losses_mod.LossBreakdown:
        cfg = self.config
        c = cfg.num_classes
        model = self.model
        image = torch.from_numpy(chw)
        feats = model.extract_features(image)
        pooled = model.pool_proposals(feats, boxes, include_img=False)
        trunk = model.det_trunk(pooled.det)
        scores = model.detection_forward(trunk)

        with torch.no_grad():
            z_np = scores.midn.numpy()
            refine_np = [x.numpy() for x in scores.refine]

        # refinement branch k is supervised from branch k-1 (branch 1 from MIDN)
        targets = [pl.assign_refine_targets(pl.select_seeds(z_np, labels, boxes), boxes, c)]
        for k in range(1, cfg.refine_branches):
            seeds_k = pl.select_seeds(refine_np[k - 1], labels, boxes)
            targets.append(pl.assign_refine_targets(seeds_k, boxes, c))

        zero = scores.image_score.sum() * 0.0
        lcls = losses_mod.classification_loss(scores.image_score, labels)
        # logit-space variants of the same formulas: gradients survive rows
        # the probability clamp would freeze
        lrefine = [losses_mod.refinement_loss_logits(lg, t)
                   for lg, t in zip(scores.refine_logits, targets)]

        lreg = zero
        if cfg.enable_reg:
            # regress only toward seeds the last branch is confident about;
            # early argmax boxes are noise and fc7 is shared with detection
            last_seeds = [s for s in pl.select_seeds(refine_np[-1], labels, boxes)
                          if s.score > cfg.fg_score_floor]
            if last_seeds:
                gt_boxes = np.stack([s.box for s in last_seeds])
                gt_cats = np.array([s.category for s in last_seeds])
                reg_targets = pl.pair_regression_targets(boxes, gt_boxes, gt_cats)
                lreg = losses_mod.regression_loss(scores.regressor, reg_targets, c)

        limg = zero
        lseg = zero
        if cfg.enable_img:
            avg_fg = np.mean([x[:, :c] for x in refine_np], axis=0)
            fg, bg = pl.sample_detection_proposals(
                avg_fg, boxes, labels, self.rng,
                top_per_category=cfg.fg_top_per_category,
                fg_nms_threshold=cfg.fg_nms_threshold,
                bg_count=cfg.bg_count, bg_iou_max=cfg.bg_iou_max,
                fg_score_floor=cfg.fg_score_floor,
                proposal_labels=targets[-1].labels)
            sel = np.concatenate([fg, bg])[:cfg.mask_proposal_cap]
            if sel.size:
                pooled_sel = model.pool_proposals(feats, boxes[sel],
                                                  include_img=True, include_det=False)
                cam = model.img_forward(pooled_sel.img)
                sel_labels = targets[-1].labels[sel]
                y_onehot = np.zeros((sel.size, c + 1))
                y_onehot[np.arange(sel.size), sel_labels] = 1.0
                limg = zero
                for k in range(cam.scores.shape[0]):
                    limg = limg + losses_mod.cam_loss_logits(cam.scores[k], y_onehot)
                if cfg.enable_seg:
                    # a thresholded map is only a mask once the CAM branch
                    # itself classifies the proposal; below the floor it is
                    # min-max-amplified noise
                    probs_np = cam.probs.detach().numpy().mean(axis=0)
                    conf = probs_np[np.arange(sel.size), sel_labels] \
                        > cfg.cam_score_floor
                    keep = np.nonzero(conf)[0]
                    if keep.size:
                        cam_np = cam.cams.detach().numpy()
                        pseudo = np.stack([pl.build_pseudo_mask(cam_np[:, i])
                                           for i in keep])
                        seg = model.seg_forward(trunk[sel[keep]])
                        lseg = losses_mod.segmentation_loss_logits(
                            seg.logits, pseudo, sel_labels[keep], c)

        return losses_mod.total_loss(lcls, lreg, lrefine, limg, lseg)

    def train_step(self) -> dict:
        """One optimization step; returns the batch-mean loss breakdown."""
        cfg = self.config
        n = len(self.items)
        picks = self.rng.integers(0, n, size=cfg.batch_size)
        flips = self.rng.random(cfg.batch_size) < 0.5 if cfg.flip_augment \
            else np.zeros(cfg.batch_size, dtype=bool)

        breakdowns = []
        for idx, flip in zip(picks, flips):
            item = self.items[idx]
            if flip:
                chw, boxes = _flip_item(item, cfg.image_size)
            else:
                chw, boxes = item.chw, item.boxes
            breakdowns.append(self._image_loss(chw, item.labels, boxes))

        total = breakdowns[0].total
        for b in breakdowns[1:]:
            total = total + b.total
        total = total / len(breakdowns)

        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {self.iteration + 1}: "
                f"{[b.to_floats() for b in breakdowns]}")

        self.model.zero_grad()
        total.backward()
        self._sgd_update()
        self.iteration += 1

        mean = {"iteration": self.iteration, "lr": self.current_lr()}
        keys = ("lcls", "lreg", "limg", "lseg", "total")
        flat = [b.to_floats() for b in breakdowns]
        for key in keys:
            mean[key] = float(np.mean([f[key] for f in flat]))
        mean["lrefine"] = [float(np.mean([f["lrefine"][k] for f in flat]))
                           for k in range(cfg.refine_branches)]
        return mean

    def _sgd_update(self) -> None:
        cfg = self.config
        lr = self.current_lr()
        if cfg.grad_clip_norm:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip_norm)
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                if p.grad is None:
                    continue
                g = p.grad
                if p.ndim > 1 and cfg.weight_decay:
                    g = g + cfg.weight_decay * p
                buf = self.momentum.get(name)
                if buf is None:
                    buf = torch.zeros_like(p)
                    self.momentum[name] = buf
                buf.mul_(cfg.momentum).add_(g)
                p.add_(buf, alpha=-lr)

    # ------------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        arrays = {f"momentum/{k}": v.numpy() for k, v in self.momentum.items()}
        extra = {
            "iteration": self.iteration,
            "rng_state": self.rng.bit_generator.state,
            "train_config": self.config.to_dict(),
        }
        save_checkpoint(path, self.model, arrays_extra=arrays, extra=extra)

    @classmethod
    def resume(cls, path: str | Path, samples: list[SampleRecord],
               proposals: dict[str, ProposalRecord]) -> "Trainer":
        net_cfg, arrays, extra = load_checkpoint(path)
        config = TrainConfig.from_dict(extra["train_config"])
        if config.net_config() != net_cfg:
            raise ValueError(f"{path}: checkpoint net config does not match its train config")
        model = WsisModel(net_cfg, init_seed=config.seed)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(arrays[name]))
        trainer = cls(samples, proposals, config, model=model)
        trainer.iteration = int(extra["iteration"])
        trainer.rng.bit_generator.state = extra["rng_state"]
        for key, arr in arrays.items():
            if key.startswith("momentum/"):
                trainer.momentum[key[len("momentum/"):]] = torch.from_numpy(arr.copy())
        return trainer

    def run(self, out_dir: str | Path, quiet: bool = True) -> Path:
        """Train to config.iterations; writes checkpoints, a JSONL loss log,
        the effective config, and a timing summary.  Returns the final
        checkpoint path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.config.save_json(out / "config.json")
        log_path = out / "train_log.jsonl"
        mode = "a" if self.iteration > 0 else "w"
        started = time.perf_counter()
        with open(log_path, mode) as log:
            while self.iteration < self.config.iterations:
                try:
                    record = self.train_step()
                except TrainingDiverged:
                    self.save(out / f"diverged_{self.iteration:06d}.ckpt")
                    raise
                if record["iteration"] == 1 \
                        or record["iteration"] % self.config.log_every == 0 \
                        or record["iteration"] == self.config.iterations:
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                    if not quiet:
                        print(f"iter {record['iteration']:>6d}  lr {record['lr']:.5f}  "
                              f"total {record['total']:.4f}")
                if self.iteration % self.config.checkpoint_every == 0 \
                        or self.iteration == self.config.iterations:
                    self.save(out / f"ckpt_{self.iteration:06d}.bin")
        final = out / "ckpt_final.bin"
        self.save(final)
        with open(out / "timing.json", "w") as f:
            json.dump({"train_seconds": time.perf_counter() - started,
                       "iterations": self.iteration,
                       "torch_threads": torch.get_num_threads()}, f)
            f.write("\n")
        return final
