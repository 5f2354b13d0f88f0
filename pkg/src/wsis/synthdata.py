"""Synthetic shapes dataset: generation, proposals, and disk formats.

Images are small RGB canvases with a textured noise background and 1..N
solid colored shapes (disc, square, triangle, ...).  Only image-level labels
are visible to training; per-instance boxes and masks are stored behind a
firewall (:func:`evaluation_access`) so that any accidental read during
proposal generation, pseudo-labeling, or training raises immediately.

Disk layout of a dataset directory::

    images/<id>.png
    labels.jsonl        {"id": str, "labels": [int]}
    gt.jsonl            {"id": str, "instances": [{"category", "box", "mask_rle"}]}
    proposals.jsonl     {"id": str, "boxes": [[x1,y1,x2,y2], ...], "segments_rle": [str]?}
    meta.json           convenience (num_classes, image_size); optional on load
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .masks import rle_decode, rle_encode

__all__ = [
    "SynthConfig",
    "ProposalConfig",
    "GroundTruthInstance",
    "GroundTruthFirewallError",
    "SampleRecord",
    "ProposalRecord",
    "DatasetFormatError",
    "evaluation_access",
    "generate_dataset",
    "generate_proposals",
    "write_dataset",
    "load_dataset",
    "write_proposals",
    "load_proposals",
    "SHAPE_NAMES",
]

SHAPE_NAMES = ("disc", "square", "plus", "triangle", "diamond")

# Category-keyed base colors (RGB in [0,1]); shape identity still carries the
# geometric cue that separates box-as-mask from real masks.
_BASE_COLORS = np.array([
    (0.85, 0.20, 0.20),
    (0.20, 0.78, 0.25),
    (0.22, 0.35, 0.90),
    (0.92, 0.85, 0.20),
    (0.85, 0.25, 0.85),
])

_access_depth = 0


class GroundTruthFirewallError(RuntimeError):
    """Hidden ground truth was read outside an evaluation_access() block."""


@contextmanager
def evaluation_access():
    """Allow reads of hidden ground truth inside the block (evaluation/serialization)."""
    global _access_depth
    _access_depth += 1
    try:
        yield
    finally:
        _access_depth -= 1


@dataclass
class GroundTruthInstance:
    category: int
    box: np.ndarray          # (4,) corner form
    mask: np.ndarray         # (H, W) bool, full image


class SampleRecord:
    """One image with its weak label vector and firewalled ground truth."""

    def __init__(self, image_id: str, image: np.ndarray, image_labels: np.ndarray,
                 ground_truth: list[GroundTruthInstance] | None = None):
        self.image_id = image_id
        self.image = image
        self.image_labels = image_labels
        self._ground_truth = ground_truth

    @property
    def has_ground_truth(self) -> bool:
        return self._ground_truth is not None

    @property
    def ground_truth(self) -> list[GroundTruthInstance]:
        if _access_depth <= 0:
            raise GroundTruthFirewallError(
                f"ground truth of image {self.image_id!r} read outside evaluation_access()")
        if self._ground_truth is None:
            raise ValueError(f"image {self.image_id!r} carries no ground truth")
        return self._ground_truth

    def __repr__(self):
        return (f"SampleRecord(id={self.image_id!r}, shape={self.image.shape}, "
                f"labels={self.image_labels.tolist()}, gt={'yes' if self._ground_truth is not None else 'no'})")


@dataclass
class ProposalRecord:
    image_id: str
    boxes: np.ndarray                       # (N, 4) corner form
    segments: list[np.ndarray] | None = None  # full-image bool masks


@dataclass
class SynthConfig:
    num_classes: int = 3
    image_size: int = 64
    min_instances: int = 1
    max_instances: int = 3
    min_half_extent: int = 7
    max_half_extent: int = 15
    color_jitter: float = 0.08
    texture_strength: float = 0.10
    name: str = "synth-shapes"

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(SHAPE_NAMES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPE_NAMES)}], got {self.num_classes}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if self.image_size % 16 != 0:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if self.min_instances > self.num_classes:
            raise ValueError("min_instances cannot exceed num_classes "
                             "(instances carry distinct categories)")
        if not 4 <= self.min_half_extent <= self.max_half_extent:
            raise ValueError("need 4 <= min_half_extent <= max_half_extent")
        if 2 * self.max_half_extent + 4 > self.image_size:
            raise ValueError("max_half_extent too large for image_size")


@dataclass
class ProposalConfig:
    # windows stay near object scale: a window large enough to contain a
    # whole object at low IoU would poison background sampling
    window_scales: tuple[int, ...] = (10, 14, 20, 28)
    window_aspects: tuple[float, ...] = (0.7, 1.0, 1.4)
    stride_fraction: float = 0.5
    region_quant_levels: int = 3
    region_min_area: int = 24
    region_max_area_fraction: float = 0.5
    region_jitter: int = 2
    dedup_stride: int = 8
    max_proposals: int = 300
    min_proposals: int = 50
    with_segments: bool = True

    def validate(self) -> None:
        if not 50 <= self.min_proposals <= self.max_proposals <= 500:
            raise ValueError("need 50 <= min_proposals <= max_proposals <= 500")
        if not self.window_scales:
            raise ValueError("window_scales must be non-empty")
        if self.dedup_stride < 0:
            raise ValueError(f"dedup_stride must be >= 0 (0 disables), got {self.dedup_stride}")


# ---------------------------------------------------------------------------
# image synthesis
# ---------------------------------------------------------------------------

def _bilerp_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly upsample a (g, g) grid to (size, size)."""
    g = grid.shape[0]
    coords = np.linspace(0.0, g - 1.0, size)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    frac = coords - i0
    rows = grid[i0][:, i0] * np.outer(1 - frac, 1 - frac) \
        + grid[i0][:, i1] * np.outer(1 - frac, frac) \
        + grid[i1][:, i0] * np.outer(frac, 1 - frac) \
        + grid[i1][:, i1] * np.outer(frac, frac)
    return rows


def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave value noise in [0, 1]."""
    acc = np.zeros((size, size))
    for cells, amp in ((4, 1.0), (8, 0.5), (16, 0.25)):
        grid = rng.random((cells + 1, cells + 1))
        acc += amp * _bilerp_upsample(grid, size)
    acc -= acc.min()
    peak = acc.max()
    if peak > 0:
        acc /= peak
    return acc


def _shape_mask(category: int, cx: int, cy: int, s: int, orientation: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    name = SHAPE_NAMES[category]
    if name == "disc":
        return dx * dx + dy * dy <= s * s
    if name == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if name == "triangle":
        # isoceles triangle, apex rotated by 90deg steps
        for _ in range(orientation % 4):
            dx, dy = dy, -dx
        h = 2 * s
        t = (dy + s) / h  # 0 at apex row, 1 at base row
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= s * t)
    if name == "plus":
        # thin arms keep the filled fraction of the bounding box below 0.5,
        # so a box-shaped mask cannot match this shape at IoU 0.5
        arm = max(1, s // 5)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= s
    raise ValueError(f"unknown category {category}")


def _mask_bbox(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    # box edges on pixel boundaries: pixel j spans [j, j+1)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _generate_sample(image_id: str, config: SynthConfig, rng: np.random.Generator) -> SampleRecord:
    size = config.image_size
    noise = _value_noise(rng, size)
    base = 0.35 + 0.25 * rng.random()
    tint = rng.uniform(-0.05, 0.05, size=3)
    image = np.clip(base + 0.18 * (noise[..., None] - 0.5) + tint, 0.05, 0.9)

    n_instances = int(rng.integers(config.min_instances,
                                   min(config.max_instances, config.num_classes) + 1))
    # one instance per category at most: a single seed proposal per present
    # category can then cover every labeled object
    cats = rng.permutation(config.num_classes)[:n_instances]
    occupancy = np.zeros((size, size), dtype=bool)
    instances: list[GroundTruthInstance] = []
    texture = _value_noise(rng, size)
    for category in cats:
        for _attempt in range(40):
            category = int(category)
            s = int(rng.integers(config.min_half_extent, config.max_half_extent + 1))
            margin = s + 2
            cx = int(rng.integers(margin, size - margin))
            cy = int(rng.integers(margin, size - margin))
            orientation = int(rng.integers(4))
            mask = _shape_mask(category, cx, cy, s, orientation, size)
            if not mask.any() or (mask & occupancy).any():
                continue
            color = np.clip(
                _BASE_COLORS[category] + rng.uniform(-config.color_jitter, config.color_jitter, 3),
                0.05, 0.98)
            mod = 1.0 + config.texture_strength * (texture[mask, None] - 0.5)
            image[mask] = np.clip(color[None, :] * mod, 0.0, 1.0)
            occupancy |= mask
            instances.append(GroundTruthInstance(category, _mask_bbox(mask), mask))
            break
    if not instances:
        raise RuntimeError(f"failed to place any instance in image {image_id}")

    # quantize to 8-bit so PNG round trips are exact
    image = np.round(image * 255.0).astype(np.uint8).astype(np.float32) / 255.0

    labels = np.zeros(config.num_classes, dtype=np.int8)
    for inst in instances:
        labels[inst.category] = 1
    return SampleRecord(image_id, image, labels, instances)


def generate_dataset(config: SynthConfig, seed: int, num_images: int) -> list[SampleRecord]:
    """Deterministically generate ``num_images`` samples for the given seed."""
    config.validate()
    if num_images < 1:
        raise ValueError(f"num_images must be >= 1, got {num_images}")
    samples = []
    for i in range(num_images):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        samples.append(_generate_sample(f"{i:06d}", config, rng))
    return samples


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------

def _region_proposals(image: np.ndarray, config: ProposalConfig,
                      rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Connected components of the color-quantized image -> boxes and segment masks."""
    h, w = image.shape[:2]
    smoothed = ndimage.uniform_filter(image, size=(3, 3, 1))
    q = np.minimum((smoothed * config.region_quant_levels).astype(int),
                   config.region_quant_levels - 1)
    index = q[..., 0] * config.region_quant_levels ** 2 + q[..., 1] * config.region_quant_levels + q[..., 2]
    boxes: list[np.ndarray] = []
    segments: list[np.ndarray] = []
    max_area = config.region_max_area_fraction * h * w
    for value in np.unique(index):
        labeled, count = ndimage.label(index == value)
        for comp in range(1, count + 1):
            mask = labeled == comp
            area = int(mask.sum())
            if area < config.region_min_area or area > max_area:
                continue
            box = _mask_bbox(mask)
            boxes.append(box)
            segments.append(mask)
            for _ in range(2):
                j = config.region_jitter
                jit = rng.integers(-j, j + 1, size=4).astype(np.float64)
                cand = box + jit
                cand[0] = np.clip(cand[0], 0, w - 2)
                cand[1] = np.clip(cand[1], 0, h - 2)
                cand[2] = np.clip(cand[2], cand[0] + 2, w)
                cand[3] = np.clip(cand[3], cand[1] + 2, h)
                boxes.append(cand)
    return boxes, segments


def _window_proposals(h: int, w: int, config: ProposalConfig) -> list[np.ndarray]:
    boxes = []
    for scale in config.window_scales:
        stride = max(3, int(round(scale * config.stride_fraction)))
        for aspect in config.window_aspects:
            bw = min(w, int(round(scale * np.sqrt(aspect))))
            bh = min(h, int(round(scale / np.sqrt(aspect))))
            if bw < 4 or bh < 4:
                continue
            xs = list(range(0, max(w - bw, 0) + 1, stride))
            ys = list(range(0, max(h - bh, 0) + 1, stride))
            for y in ys:
                for x in xs:
                    boxes.append(np.array([x, y, x + bw, y + bh], dtype=np.float64))
    return boxes


def generate_proposals(sample: SampleRecord, config: ProposalConfig, seed: int) -> ProposalRecord:
    """Candidate boxes (and segment masks) from the image alone.

    Never touches hidden ground truth; the output is a pure function of
    (image, config, seed).
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    image = sample.image
    h, w = image.shape[:2]
    region_boxes, region_segments = _region_proposals(image, config, rng)
    window_boxes = _window_proposals(h, w, config)

    # boxes spanning the same dedup_stride cell range pool to the same
    # detection feature, so duplicates would only split scores across
    # indistinguishable copies; keep the first box of each span
    seen: set[tuple[int, int, int, int]] = set()

    def fresh(box: np.ndarray) -> bool:
        s = config.dedup_stride
        if not s:
            return True
        lx, ly = max(1, w // s), max(1, h // s)
        ax = min(max(int(np.floor(box[0] / s)), 0), lx - 1)
        bx = min(max(int(np.ceil(box[2] / s)), ax + 1), lx)
        ay = min(max(int(np.floor(box[1] / s)), 0), ly - 1)
        by = min(max(int(np.ceil(box[3] / s)), ay + 1), ly)
        key = (ax, bx, ay, by)
        if key in seen:
            return False
        seen.add(key)
        return True

    boxes = [b for b in region_boxes if fresh(b)]
    window_boxes = [b for b in window_boxes if fresh(b)]
    budget = max(0, max(config.max_proposals, config.min_proposals) - len(boxes))
    if len(window_boxes) > budget:
        pick = rng.choice(len(window_boxes), size=budget, replace=False)
        window_boxes = [window_boxes[i] for i in sorted(pick)]
    boxes.extend(window_boxes)
    # region boxes carry the recall; trim from the window end on overflow
    boxes = boxes[:config.max_proposals]
    inset = 0
    while len(boxes) < config.min_proposals:
        boxes.append(np.array([float(inset), float(inset),
                               float(w - inset), float(h - inset)]))
        inset = (inset + 1) % (min(h, w) // 4)

    box_arr = np.stack(boxes).astype(np.float64)
    box_arr[:, 0] = np.clip(box_arr[:, 0], 0, w - 1)
    box_arr[:, 1] = np.clip(box_arr[:, 1], 0, h - 1)
    box_arr[:, 2] = np.clip(box_arr[:, 2], box_arr[:, 0] + 1, w)
    box_arr[:, 3] = np.clip(box_arr[:, 3], box_arr[:, 1] + 1, h)

    seg_masks = region_segments if config.with_segments else None
    return ProposalRecord(sample.image_id, box_arr, seg_masks)


# ---------------------------------------------------------------------------
# disk formats
# ---------------------------------------------------------------------------

class DatasetFormatError(ValueError):
    """A dataset or proposals file is malformed; message names file and field."""


def write_dataset(samples: list[SampleRecord], out_dir: str | Path,
                  num_classes: int, include_gt: bool = True) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        arr = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(out / "images" / f"{s.image_id}.png")
    with open(out / "labels.jsonl", "w") as f:
        for s in samples:
            labels = [int(i) for i in np.nonzero(s.image_labels)[0]]
            f.write(json.dumps({"id": s.image_id, "labels": labels}) + "\n")
    if include_gt and all(s.has_ground_truth for s in samples):
        with evaluation_access(), open(out / "gt.jsonl", "w") as f:
            for s in samples:
                instances = [{
                    "category": int(inst.category),
                    "box": [float(v) for v in inst.box],
                    "mask_rle": rle_encode(inst.mask),
                } for inst in s.ground_truth]
                f.write(json.dumps({"id": s.image_id, "instances": instances}) + "\n")
    with open(out / "meta.json", "w") as f:
        h, w = samples[0].image.shape[:2]
        json.dump({"num_classes": num_classes, "image_size": [h, w]}, f)
        f.write("\n")


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
    return records


def load_dataset(path: str | Path, num_classes: int | None = None) -> list[SampleRecord]:
    """Load a dataset directory; ground truth is attached when gt.jsonl exists."""
    root = Path(path)
    labels_path = root / "labels.jsonl"
    if not labels_path.exists():
        raise DatasetFormatError(f"missing labels file: {labels_path}")
    label_rows = _read_jsonl(labels_path)
    if num_classes is None:
        meta_path = root / "meta.json"
        if meta_path.exists():
            num_classes = int(json.load(open(meta_path)).get("num_classes"))
        else:
            seen = [l for row in label_rows for l in row.get("labels", [])]
            num_classes = max(seen) + 1 if seen else 1

    gt_rows: dict[str, dict] = {}
    gt_path = root / "gt.jsonl"
    if gt_path.exists():
        for row in _read_jsonl(gt_path):
            gt_rows[str(row.get("id"))] = row

    samples = []
    for row in label_rows:
        if "id" not in row or "labels" not in row:
            raise DatasetFormatError(f"{labels_path}: row missing 'id' or 'labels': {row}")
        image_id = str(row["id"])
        img_path = root / "images" / f"{image_id}.png"
        if not img_path.exists():
            raise DatasetFormatError(f"missing image file: {img_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        labels = np.zeros(num_classes, dtype=np.int8)
        for l in row["labels"]:
            if not isinstance(l, int) or l < 0:
                raise DatasetFormatError(f"{labels_path}: id {image_id}: bad label {l!r}")
            if l >= num_classes:
                raise DatasetFormatError(
                    f"{labels_path}: id {image_id}: label index {l} >= num_classes {num_classes}")
            labels[l] = 1

        ground_truth = None
        if image_id in gt_rows:
            h, w = image.shape[:2]
            ground_truth = []
            for k, inst in enumerate(gt_rows[image_id].get("instances", [])):
                for fieldname in ("category", "box", "mask_rle"):
                    if fieldname not in inst:
                        raise DatasetFormatError(
                            f"{gt_path}: id {image_id}: instance {k} missing field '{fieldname}'")
                cat = int(inst["category"])
                if cat < 0 or cat >= num_classes:
                    raise DatasetFormatError(
                        f"{gt_path}: id {image_id}: instance {k} category {cat} out of range")
                box = np.asarray(inst["box"], dtype=np.float64)
                if box.shape != (4,) or box[2] <= box[0] or box[3] <= box[1]:
                    raise DatasetFormatError(
                        f"{gt_path}: id {image_id}: instance {k} has invalid box {inst['box']}")
                try:
                    mask = rle_decode(inst["mask_rle"], (h, w))
                except ValueError as exc:
                    raise DatasetFormatError(
                        f"{gt_path}: id {image_id}: instance {k} mask_rle: {exc}") from None
                ground_truth.append(GroundTruthInstance(cat, box, mask))
        samples.append(SampleRecord(image_id, image, labels, ground_truth))
    return samples


def write_proposals(records: list[ProposalRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for rec in records:
            row = {"id": rec.image_id, "boxes": [[float(v) for v in b] for b in rec.boxes]}
            if rec.segments is not None:
                row["segments_rle"] = [rle_encode(m) for m in rec.segments]
            f.write(json.dumps(row) + "\n")


def load_proposals(path: str | Path, image_shape: tuple[int, int] | None = None) -> dict[str, ProposalRecord]:
    """Load proposals.jsonl -> mapping image id -> ProposalRecord."""
    p = Path(path)
    if not p.exists():
        raise DatasetFormatError(f"missing proposals file: {p}")
    records = {}
    for row in _read_jsonl(p):
        if "id" not in row or "boxes" not in row:
            raise DatasetFormatError(f"{p}: row missing 'id' or 'boxes': {list(row)}")
        image_id = str(row["id"])
        boxes = np.asarray(row["boxes"], dtype=np.float64)
        if boxes.size == 0:
            raise DatasetFormatError(f"{p}: id {image_id}: 'boxes' must contain at least one box")
        if boxes.ndim != 2 or boxes.shape[1] != 4:
            raise DatasetFormatError(f"{p}: id {image_id}: 'boxes' must be Nx4")
        bad = np.nonzero((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1]))[0]
        if bad.size:
            raise DatasetFormatError(
                f"{p}: id {image_id}: box {int(bad[0])} has non-positive extent "
                f"{boxes[bad[0]].tolist()}")
        segments = None
        if "segments_rle" in row and row["segments_rle"] is not None:
            if image_shape is None:
                raise DatasetFormatError(
                    f"{p}: id {image_id}: segments_rle present but no image shape supplied")
            try:
                segments = [rle_decode(s, image_shape) for s in row["segments_rle"]]
            except ValueError as exc:
                raise DatasetFormatError(f"{p}: id {image_id}: segments_rle: {exc}") from None
        records[image_id] = ProposalRecord(image_id, boxes, segments)
    return records
