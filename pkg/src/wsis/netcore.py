"""Differentiable model components.

A small 4-stage CNN backbone exposes feature taps at strides 4/8/16.  Each
proposal box is max-pool binned from those maps: a 7x7 grid from the stride-8
tap feeds the detection trunk (two-stream scores, refinement branches, a box
regressor, and the segmentation head), and per-level TxT grids feed the
activation-map branches used for mask generation.

All forward passes are pure functions of (parameters, inputs); parameter
initialization is driven by an explicit torch.Generator, and checkpoints
round-trip bit-exact through a versioned binary container.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "NetConfig",
    "BackboneFeatures",
    "PooledFeatures",
    "ScoreTensors",
    "CamStack",
    "SegOutput",
    "WsisModel",
    "save_checkpoint",
    "load_checkpoint",
    "build_model_from_checkpoint",
    "CAM_BRANCH_LEVELS",
]

BACKBONE_CHANNELS = (16, 32, 64, 128)
TAP_STRIDES = (2, 4, 8)

# which feature level (0=stride2, 1=stride4, 2=stride8) each activation-map
# branch reads, by branch count
CAM_BRANCH_LEVELS = {1: (2,), 2: (1, 2), 3: (0, 1, 2), 4: (0, 1, 1, 2)}


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 3
    mask_size: int = 28          # T: side of all TxT mask/activation grids
    refine_branches: int = 3     # K
    cam_branches: int = 3
    det_grid: int = 7
    fc_dim: int = 128
    img_dim: int = 24
    seg_dim: int = 16
    cam_bias: bool = False
    uniform_gap: bool = False
    reg_class_agnostic: bool = True

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.mask_size < 2:
            raise ValueError(f"mask_size must be >= 2, got {self.mask_size}")
        if self.refine_branches < 1:
            raise ValueError(f"refine_branches must be >= 1, got {self.refine_branches}")
        if self.cam_branches not in CAM_BRANCH_LEVELS:
            raise ValueError(f"cam_branches must be in {sorted(CAM_BRANCH_LEVELS)}, "
                             f"got {self.cam_branches}")
        if self.det_grid < 1:
            raise ValueError(f"det_grid must be >= 1, got {self.det_grid}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class BackboneFeatures:
    maps: tuple[torch.Tensor, ...]   # one (C_l, H/s_l, W/s_l) map per tap
    strides: tuple[int, ...] = TAP_STRIDES


@dataclass
class PooledFeatures:
    det: torch.Tensor | None                  # (R, 64, det_grid, det_grid)
    img: list[torch.Tensor] | None = None     # per level: (R, C_l, T, T)


@dataclass
class ScoreTensors:
    midn: torch.Tensor          # z: (R, C), entries in [0, 1]
    image_score: torch.Tensor   # phi: (C,), column sums of z
    refine: list[torch.Tensor]  # per branch: (R, C+1) rows summing to 1
    regressor: torch.Tensor     # (R, 4) or (R, 4C)
    refine_logits: list[torch.Tensor] | None = None  # pre-softmax, for stable losses


@dataclass
class CamStack:
    cams: torch.Tensor          # (B, R, C+1, T, T) raw activation maps
    probs: torch.Tensor         # (B, R, C+1) softmax of weighted-GAP scores
    scores: torch.Tensor | None = None  # (B, R, C+1) weighted-GAP pre-softmax


@dataclass
class SegOutput:
    probs: torch.Tensor         # (R, C+1, T, T) in (0, 1)
    logits: torch.Tensor | None = None  # pre-sigmoid, for stable losses


class _Backbone(nn.Module):
    """conv3x3+relu+maxpool stages; replicate padding keeps constant inputs
    constant all the way through (border cells otherwise diverge)."""

    def __init__(self):
        super().__init__()
        chans = BACKBONE_CHANNELS
        self.conv1 = nn.Conv2d(3, chans[0], 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(chans[0], chans[1], 3, padding=1, padding_mode="replicate")
        self.conv3 = nn.Conv2d(chans[1], chans[2], 3, padding=1, padding_mode="replicate")
        self.conv4 = nn.Conv2d(chans[2], chans[3], 3, padding=1, padding_mode="replicate")
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        # taps at strides 2/4/8: objects of a dozen pixels must still span
        # several cells on every level, or per-proposal maps degenerate to
        # single values and activation maps cannot outline shapes
        x = self.pool(F.relu(self.conv1(x)))
        t2 = F.relu(self.conv2(x))
        t4 = self.pool(F.relu(self.conv3(t2)))
        t8 = self.pool(F.relu(self.conv4(t4)))
        return t2, t4, t8


def _gap_weights(t: int, uniform: bool) -> torch.Tensor:
    """Normalized spatial weights for global average pooling.

    Isotropic Gaussian centered on the grid (sigma = t/4), or a uniform grid
    when ``uniform`` is set (the plain-mean limit).
    """
    if uniform:
        w = torch.full((t, t), 1.0 / (t * t), dtype=torch.float64)
        return w
    coords = torch.arange(t, dtype=torch.float64)
    center = (t - 1) / 2.0
    sigma = t / 4.0
    d2 = (coords - center) ** 2
    g = torch.exp(-(d2[:, None] + d2[None, :]) / (2.0 * sigma * sigma))
    return g / g.sum()


def _roi_bin_range(lo: float, hi: float, stride: int, limit: int) -> tuple[int, int]:
    a = int(np.floor(lo / stride))
    b = int(np.ceil(hi / stride))
    a = min(max(a, 0), limit - 1)
    b = min(max(b, a + 1), limit)
    return a, b


def _roi_max_pool(fmap: torch.Tensor, boxes: np.ndarray, stride: int, out: int) -> torch.Tensor:
    """SPP-style max binning of each box's projection onto one feature map.

    fmap: (C, H, W).  Degenerate projections clamp to at least one cell.
    Crops are grouped by size so each group pools in one batched call.
    """
    _, h, w = fmap.shape
    ranges = []
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, box in enumerate(boxes):
        a, b = _roi_bin_range(float(box[0]), float(box[2]), stride, w)
        c, d = _roi_bin_range(float(box[1]), float(box[3]), stride, h)
        ranges.append((a, b, c, d))
        buckets.setdefault((d - c, b - a), []).append(i)
    slots: list[torch.Tensor | None] = [None] * len(ranges)
    for idxs in buckets.values():
        crops = torch.stack([fmap[:, ranges[i][2]:ranges[i][3], ranges[i][0]:ranges[i][1]]
                             for i in idxs])
        pooled = F.adaptive_max_pool2d(crops, (out, out))
        for j, i in enumerate(idxs):
            slots[i] = pooled[j]
    return torch.stack(slots)


class WsisModel(nn.Module):
    """Backbone + detection, activation-map, and segmentation heads."""

    def __init__(self, config: NetConfig, init_seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        c = config.num_classes
        t = config.mask_size

        self.backbone = _Backbone()
        # stand-in for the deeper trunk on the detection path: depthwise 3x3
        # then pointwise 1x1, keeping the 7x7 grid
        det_ch = BACKBONE_CHANNELS[2]
        self.trunk_dw = nn.Conv2d(det_ch, det_ch, 3, padding=1, groups=det_ch,
                                  padding_mode="replicate")
        self.trunk_pw = nn.Conv2d(det_ch, det_ch, 1)
        flat = det_ch * config.det_grid * config.det_grid
        self.fc6 = nn.Linear(flat, config.fc_dim)
        self.fc7 = nn.Linear(config.fc_dim, config.fc_dim)
        self.fc_cls = nn.Linear(config.fc_dim, c)
        self.fc_det = nn.Linear(config.fc_dim, c)
        self.fc_refine = nn.ModuleList(
            [nn.Linear(config.fc_dim, c + 1) for _ in range(config.refine_branches)])
        self.fc_reg_hidden = nn.Linear(config.fc_dim, config.fc_dim)
        reg_out = 4 if config.reg_class_agnostic else 4 * c
        self.fc_reg_out = nn.Linear(config.fc_dim, reg_out)

        self.img_embed = nn.ModuleList(
            [nn.Conv2d(ch, config.img_dim, 1) for ch in BACKBONE_CHANNELS[1:]])
        levels = CAM_BRANCH_LEVELS[config.cam_branches]
        self.cam_conv = nn.ModuleList(
            [nn.Conv2d(config.img_dim, c + 1, 1, bias=config.cam_bias) for _ in levels])

        sd = config.seg_dim
        self.seg_convs = nn.ModuleList([
            nn.Conv2d(det_ch, sd, 3, padding=1, padding_mode="replicate"),
            nn.Conv2d(sd, sd, 3, padding=1, padding_mode="replicate"),
            nn.Conv2d(sd, sd, 3, padding=1, padding_mode="replicate"),
            nn.Conv2d(sd, sd, 3, padding=1, padding_mode="replicate"),
        ])
        self.seg_out = nn.Conv2d(sd, c + 1, 1)

        self.register_buffer("gap_weights", _gap_weights(t, config.uniform_gap))
        self._init_parameters(init_seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, m in self.named_modules():
            if isinstance(m, nn.Conv2d):
                if name.startswith("cam_conv") or name == "seg_out":
                    # per-class scoring convs start near zero like the fc
                    # heads; a fresh head then fits its own weights before
                    # pushing gradient into the shared trunk
                    m.weight.data.normal_(0.0, 0.01, generator=gen)
                else:
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
                    m.weight.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.data.zero_()
            elif isinstance(m, nn.Linear):
                m.weight.data.normal_(0.0, 0.01, generator=gen)
                m.bias.data.zero_()

    # ------------------------------------------------------------------
    # forward pieces (single image)
    # ------------------------------------------------------------------

    def extract_features(self, image: torch.Tensor) -> BackboneFeatures:
        """image: (3, H, W) in [0, 1], H and W divisible by 16."""
        _, h, w = image.shape
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"image size must be divisible by 16, got {h}x{w}")
        x = image.unsqueeze(0) * 2.0 - 1.0
        t2, t4, t8 = self.backbone(x)
        return BackboneFeatures((t2[0], t4[0], t8[0]))

    def pool_proposals(self, feats: BackboneFeatures, boxes: np.ndarray,
                       include_img: bool = True, include_det: bool = True) -> PooledFeatures:
        """Fixed-size grids per box: det 7x7 from the middle (64-channel) tap,
        plus TxT grids from every tap for the activation-map path."""
        det = None
        if include_det:
            det = _roi_max_pool(feats.maps[1], boxes, feats.strides[1], self.config.det_grid)
        img = None
        if include_img:
            t = self.config.mask_size
            img = [_roi_max_pool(m, boxes, s, t)
                   for m, s in zip(feats.maps, feats.strides)]
        return PooledFeatures(det, img)

    def det_trunk(self, det_pooled: torch.Tensor) -> torch.Tensor:
        """(R, 64, g, g) pooled grids -> same-shape trunk features."""
        return F.relu(self.trunk_pw(self.trunk_dw(det_pooled)))

    def detection_forward(self, trunk: torch.Tensor) -> ScoreTensors:
        r = trunk.shape[0]
        h = F.relu(self.fc6(trunk.reshape(r, -1)))
        h = F.relu(self.fc7(h))
        cls_scores = torch.softmax(self.fc_cls(h), dim=1)    # over categories
        det_scores = torch.softmax(self.fc_det(h), dim=0)    # over proposals
        z = cls_scores * det_scores
        phi = z.sum(dim=0)
        refine_logits = [fc(h) for fc in self.fc_refine]
        refine = [torch.softmax(lg, dim=1) for lg in refine_logits]
        reg = self.fc_reg_out(F.relu(self.fc_reg_hidden(h)))
        return ScoreTensors(z, phi, refine, reg, refine_logits)

    def img_forward(self, img_pooled: list[torch.Tensor]) -> CamStack:
        """Per branch: embed level feature, smooth with log(1+relu), produce
        per-category maps, score them by Gaussian-weighted GAP + softmax."""
        levels = CAM_BRANCH_LEVELS[self.config.cam_branches]
        w = self.gap_weights
        cams = []
        probs = []
        raw_scores = []
        for branch, level in enumerate(levels):
            f = self.img_embed[level](img_pooled[level])
            f = torch.log1p(F.relu(f))
            m = self.cam_conv[branch](f)                     # (R, C+1, T, T)
            scores = (m * w).sum(dim=(2, 3))                 # (R, C+1)
            cams.append(m)
            raw_scores.append(scores)
            probs.append(torch.softmax(scores, dim=1))
        return CamStack(torch.stack(cams), torch.stack(probs), torch.stack(raw_scores))

    def seg_forward(self, trunk: torch.Tensor) -> SegOutput:
        """Detection-path trunk features -> per-pixel (C+1)-channel masks."""
        t = self.config.mask_size
        x = F.interpolate(trunk, size=(t, t), mode="bilinear", align_corners=False)
        for conv in self.seg_convs:
            x = F.relu(conv(x))
        logits = self.seg_out(x)
        return SegOutput(torch.sigmoid(logits), logits)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"WSISCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path: str | Path, model: WsisModel,
                    arrays_extra: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> None:
    """Write parameters (+ named extra arrays and JSON metadata) bit-exactly.

    Layout: magic, u64 header length, canonical-JSON header, raw array bytes
    in header order.  No timestamps, so identical state gives identical files.
    """
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        entries.append((name, p.detach().cpu().numpy()))
    for name, arr in sorted((arrays_extra or {}).items()):
        entries.append((name, np.asarray(arr)))

    array_meta = []
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr).tobytes()
        array_meta.append({"name": name, "dtype": arr.dtype.str,
                           "shape": list(arr.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = {
        "version": _CKPT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "arrays": array_meta,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[NetConfig, dict[str, np.ndarray], dict]:
    """Read a checkpoint -> (config, name->array mapping, extra metadata)."""
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode())
        if header.get("version") != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {}
        for meta in header["arrays"]:
            blob = f.read(meta["nbytes"])
            if len(blob) != meta["nbytes"]:
                raise ValueError(f"{path}: truncated array {meta['name']!r}")
            arrays[meta["name"]] = np.frombuffer(blob, dtype=np.dtype(meta["dtype"])) \
                .reshape(meta["shape"]).copy()
    config = NetConfig.from_dict(header["config"])
    return config, arrays, header.get("extra", {})


def build_model_from_checkpoint(path: str | Path) -> tuple[WsisModel, dict[str, np.ndarray], dict]:
    """Rebuild a model with loaded parameters; also return non-parameter
    arrays (optimizer state etc.) and the extra metadata dict."""
    config, arrays, extra = load_checkpoint(path)
    model = WsisModel(config)
    first = next(iter(model.named_parameters()))[0]
    if first in arrays and arrays[first].dtype == np.float64:
        model.double()
    leftovers = dict(arrays)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays:
                raise ValueError(f"{path}: checkpoint missing parameter {name!r}")
            arr = leftovers.pop(name)
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{path}: parameter {name!r} shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return model, leftovers, extra
