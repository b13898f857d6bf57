"""Toy single-stage detector: default boxes, box coding, model and multibox loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
BACKGROUND = 0
EPS = 1e-7


class ConfigError(ValueError):
    """Invalid geometry, model or training configuration."""


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass
class Annotation:
    """Ground-truth objects of one image.

    ``labels`` holds class ids in ``[1, C]``; ``boxes`` holds normalized
    ``(xmin, ymin, xmax, ymax)`` rows.
    """

    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    difficult: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.difficult is None:
            self.difficult = np.zeros(len(self.labels), dtype=bool)
        self.difficult = np.asarray(self.difficult, dtype=bool).reshape(-1)
        if not (len(self.labels) == len(self.boxes) == len(self.difficult)):
            raise ValueError("labels, boxes and difficult must have equal length")
        if np.any(self.labels < 1):
            raise ValueError("class id 0 is reserved for background")
        if np.any(self.boxes[:, 0] >= self.boxes[:, 2]) or np.any(self.boxes[:, 1] >= self.boxes[:, 3]):
            raise ValueError("boxes must satisfy xmin < xmax and ymin < ymax")

    def __len__(self):
        return len(self.labels)

    def without_difficult(self) -> "Annotation":
        keep = ~self.difficult
        return Annotation(self.labels[keep], self.boxes[keep])


@dataclass
class DefaultBoxSet:
    """Anchor geometry; row ``k`` of ``boxes`` is ``(cx, cy, w, h)``.

    ``k`` enumerates ``(level, row, col, box)`` in row-major order.
    """

    levels: list[tuple[int, int, int]]
    boxes: np.ndarray

    def __len__(self):
        return len(self.boxes)

    @property
    def offsets(self) -> list[int]:
        out, k = [], 0
        for h, w, d in self.levels:
            out.append(k)
            k += h * w * d
        return out

    def flat_index(self, p: int, r: int, c: int, d: int) -> int:
        h, w, nd = self.levels[p]
        if not (0 <= r < h and 0 <= c < w and 0 <= d < nd):
            raise IndexError((p, r, c, d))
        return self.offsets[p] + (r * w + c) * nd + d

    def unravel(self, k: int) -> tuple[int, int, int, int]:
        for p, (start, (h, w, nd)) in enumerate(zip(self.offsets, self.levels)):
            if k < start + h * w * nd:
                r, rem = divmod(k - start, w * nd)
                c, d = divmod(rem, nd)
                return p, r, c, d
        raise IndexError(k)

    def corners(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.boxes)


@dataclass
class PredictionGrid:
    """Detector output over all default boxes.

    ``cls`` has shape ``(..., K, C+1)`` with softmax rows (column 0 is
    background); ``loc`` has shape ``(..., K, 4)``. ``log_cls`` is carried
    along when the producer has exact log-probabilities.
    """

    cls: torch.Tensor
    loc: torch.Tensor
    log_cls: torch.Tensor | None = None

    @classmethod
    def from_probs(cls, probs, loc=None, dtype=torch.float64) -> "PredictionGrid":
        probs = torch.as_tensor(probs, dtype=dtype)
        if loc is None:
            loc = torch.zeros(probs.shape[:-1] + (4,), dtype=dtype)
        return cls(probs, torch.as_tensor(loc, dtype=dtype))

    def __getitem__(self, idx) -> "PredictionGrid":
        log_cls = None if self.log_cls is None else self.log_cls[idx]
        return PredictionGrid(self.cls[idx], self.loc[idx], log_cls)

    def __len__(self):
        return len(self.cls)

    def detach(self) -> "PredictionGrid":
        log_cls = None if self.log_cls is None else self.log_cls.detach()
        return PredictionGrid(self.cls.detach(), self.loc.detach(), log_cls)

    def log_probs(self) -> torch.Tensor:
        if self.log_cls is not None:
            return self.log_cls
        return torch.log(self.cls.clamp_min(EPS))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    wh = b[..., 2:] - b[..., :2]
    return np.concatenate([b[..., :2] + wh / 2, wh], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def build_default_boxes(
    levels: Sequence[tuple[int, int]],
    scales: Sequence[float],
    aspect_ratios: Sequence[float] | Sequence[Sequence[float]] = (1.0,),
) -> DefaultBoxSet:
    """SSD-style anchors, one ``scale`` per level.

    Each aspect ratio ``a`` yields a box of width ``s*sqrt(a)`` and height
    ``s/sqrt(a)`` centred on the cell.
    """
    if len(levels) == 0:
        raise ConfigError("at least one pyramid level is required")
    if len(scales) != len(levels):
        raise ConfigError("need one scale per level")
    if len(aspect_ratios) and not isinstance(aspect_ratios[0], (int, float)):
        per_level = [tuple(float(a) for a in ar) for ar in aspect_ratios]
    else:
        per_level = [tuple(float(a) for a in aspect_ratios)] * len(levels)
    if len(per_level) != len(levels):
        raise ConfigError("need one aspect-ratio list per level")

    rows, descr = [], []
    for (h, w), s, ars in zip(levels, scales, per_level):
        if h < 1 or w < 1:
            raise ConfigError(f"invalid grid size {(h, w)}")
        if not 0 < s <= 1:
            raise ConfigError(f"scale must lie in (0, 1], got {s}")
        if not ars or any(a <= 0 for a in ars):
            raise ConfigError("aspect ratios must be positive")
        sizes = [(s * np.sqrt(a), s / np.sqrt(a)) for a in ars]
        for r in range(h):
            for c in range(w):
                for bw, bh in sizes:
                    rows.append(((c + 0.5) / w, (r + 0.5) / h, bw, bh))
        descr.append((int(h), int(w), len(ars)))
    return DefaultBoxSet(descr, np.array(rows, dtype=np.float64))


def encode_offsets(gt_cxcywh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    g = np.asarray(gt_cxcywh, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    return np.stack([
        (g[..., 0] - a[..., 0]) / a[..., 2],
        (g[..., 1] - a[..., 1]) / a[..., 3],
        np.log(g[..., 2] / a[..., 2]),
        np.log(g[..., 3] / a[..., 3]),
    ], axis=-1)


def decode_offsets(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_offsets`; returns ``(cx, cy, w, h)``."""
    t = np.asarray(offsets, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    return np.stack([
        a[..., 0] + t[..., 0] * a[..., 2],
        a[..., 1] + t[..., 1] * a[..., 3],
        a[..., 2] * np.exp(t[..., 2]),
        a[..., 3] * np.exp(t[..., 3]),
    ], axis=-1)


def encode_gt(annotation: Annotation, boxes: DefaultBoxSet, iou_threshold: float = 0.5):
    """Match ground truth to default boxes.

    Returns ``(target_cls, target_loc, match_mask)`` with shapes ``(K,)``,
    ``(K, 4)`` and ``(K,)``.
    """
    if not 0 < iou_threshold < 1:
        raise ConfigError("iou_threshold must lie in (0, 1)")
    k = len(boxes)
    target_cls = np.zeros(k, dtype=np.int64)
    target_loc = np.zeros((k, 4), dtype=np.float64)
    if len(annotation) == 0:
        return target_cls, target_loc, np.zeros(k, dtype=bool)

    overlaps = iou_matrix(boxes.corners(), annotation.boxes)  # (K, G)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(k), best_gt]
    # every GT keeps its best anchor even below threshold
    for g, a in enumerate(overlaps.argmax(axis=0)):
        best_gt[a] = g
        best_iou[a] = 2.0
    match = best_iou >= iou_threshold
    target_cls[match] = annotation.labels[best_gt[match]]
    gt = xyxy_to_cxcywh(annotation.boxes)[best_gt[match]]
    target_loc[match] = encode_offsets(gt, boxes.boxes[match])
    return target_cls, target_loc, match


def decode_predictions(grid: PredictionGrid, boxes: DefaultBoxSet, score_threshold: float = 0.0):
    """List ``(class_id, score, (xmin, ymin, xmax, ymax))`` for one image.

    Every foreground class at every location whose score exceeds
    ``score_threshold`` is reported; boxes are clipped to the unit square.
    """
    probs = grid.cls.detach().cpu().numpy()
    decoded = np.clip(cxcywh_to_xyxy(decode_offsets(grid.loc.detach().cpu().numpy(), boxes.boxes)), 0.0, 1.0)
    out = []
    ks, cs = np.nonzero(probs[:, 1:] > score_threshold)
    for k, c in zip(ks, cs):
        out.append((int(c) + 1, float(probs[k, c + 1]), tuple(decoded[k])))
    return out


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ArchConfig:
    """Architecture descriptor stored alongside the weights."""

    image_size: int = 96
    num_classes: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 64)
    head_stages: tuple[int, ...] = (2, 3)
    scales: tuple[float, ...] = (0.22, 0.42)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    head_kernel: int = 3
    groups: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.head_stages = tuple(int(s) for s in self.head_stages)
        self.scales = tuple(float(s) for s in self.scales)
        self.aspect_ratios = tuple(float(a) for a in self.aspect_ratios)
        if len(self.scales) != len(self.head_stages):
            raise ConfigError("need one scale per head stage")
        if any(s >= len(self.channels) or s < 0 for s in self.head_stages):
            raise ConfigError("head stage index out of range")
        if self.image_size % (2 ** len(self.channels)):
            raise ConfigError("image_size must be divisible by 2**len(channels)")
        if any(c % self.groups for c in self.channels):
            raise ConfigError("channels must be divisible by groups")

    def grid_sizes(self) -> list[tuple[int, int]]:
        return [(self.image_size >> (s + 1),) * 2 for s in self.head_stages]

    def default_boxes(self) -> DefaultBoxSet:
        return build_default_boxes(self.grid_sizes(), self.scales, self.aspect_ratios)


class ToyDetector(nn.Module):
    """Stride-2 conv stages with SSD-style heads on selected stages.

    Input images are NHWC in ``[0, 1]``. GroupNorm keeps every image's
    output independent of the rest of the batch.
    """

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        self.arch = arch or ArchConfig()
        a = self.arch
        self.default_boxes = a.default_boxes()
        self.num_anchors = len(a.aspect_ratios)
        stages, prev = [], 3
        for ch in a.channels:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                nn.GroupNorm(a.groups, ch),
                nn.ReLU(inplace=True),
            ))
            prev = ch
        self.stages = nn.ModuleList(stages)
        pad = a.head_kernel // 2
        self.cls_heads = nn.ModuleList(
            nn.Conv2d(a.channels[s], self.num_anchors * (a.num_classes + 1), a.head_kernel, padding=pad)
            for s in a.head_stages)
        self.loc_heads = nn.ModuleList(
            nn.Conv2d(a.channels[s], self.num_anchors * 4, a.head_kernel, padding=pad)
            for s in a.head_stages)

    def forward(self, images) -> PredictionGrid:
        x = torch.as_tensor(images, dtype=self.cls_heads[0].weight.dtype)
        if x.ndim != 4 or x.shape[1:] != (self.arch.image_size, self.arch.image_size, 3):
            raise ValueError(f"expected (N, {self.arch.image_size}, {self.arch.image_size}, 3) images, got {tuple(x.shape)}")
        x = x.permute(0, 3, 1, 2)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        n, c1 = x.shape[0], self.arch.num_classes + 1
        logits, locs = [], []
        for s, ch, lh in zip(self.arch.head_stages, self.cls_heads, self.loc_heads):
            f = feats[s]
            logits.append(ch(f).permute(0, 2, 3, 1).reshape(n, -1, c1))
            locs.append(lh(f).permute(0, 2, 3, 1).reshape(n, -1, 4))
        logits = torch.cat(logits, dim=1)
        return PredictionGrid(logits.softmax(-1), torch.cat(locs, dim=1), logits.log_softmax(-1))

    def parameter_vector(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters())

    def load_parameter_vector(self, theta: torch.Tensor) -> None:
        nn.utils.vector_to_parameters(theta, self.parameters())


def forward(model: ToyDetector, images) -> PredictionGrid:
    """Evaluation-mode forward pass without gradient tracking."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(images)
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# Supervised loss
# ---------------------------------------------------------------------------


def multibox_loss(grid: PredictionGrid, target_cls, target_loc, match_mask, neg_pos_ratio: float = 3.0,
                  return_parts: bool = False):
    """Cross-entropy with hard-negative mining plus smooth-L1 on positives.

    Inputs are batched: ``grid`` ``(N, K, ...)``, targets ``(N, K)`` /
    ``(N, K, 4)``. Both terms are divided by ``max(1, #positives)``.
    """
    target_cls = torch.as_tensor(np.asarray(target_cls), dtype=torch.long)
    target_loc = torch.as_tensor(np.asarray(target_loc), dtype=grid.loc.dtype)
    pos = torch.as_tensor(np.asarray(match_mask), dtype=torch.bool)
    if grid.cls.ndim == 2:
        grid, target_cls, target_loc, pos = grid[None], target_cls[None], target_loc[None], pos[None]
    logp = grid.log_probs()

    ce = -logp.gather(-1, target_cls.unsqueeze(-1)).squeeze(-1)  # (N, K)
    with torch.no_grad():
        neg_score = ce.detach().clone()
        neg_score[pos] = -float("inf")
        order = torch.sort(neg_score, dim=1, descending=True, stable=True).indices
        rank = torch.empty_like(order)
        rank.scatter_(1, order, torch.arange(order.shape[1]).expand_as(order))
        n_pos = pos.sum(dim=1, keepdim=True)
        n_neg = torch.where(n_pos > 0, (neg_pos_ratio * n_pos).long(), torch.ones_like(n_pos))
        n_neg = torch.minimum(n_neg, (~pos).sum(dim=1, keepdim=True))
        neg = (rank < n_neg) & ~pos
    norm = max(1, int(pos.sum()))
    cls_term = ce[pos | neg].sum() / norm
    if pos.any():
        loc_term = F.smooth_l1_loss(grid.loc[pos], target_loc[pos], reduction="sum", beta=1.0) / norm
    else:
        loc_term = grid.loc.sum() * 0.0
    if return_parts:
        return cls_term + loc_term, cls_term, loc_term
    return cls_term + loc_term


def encode_batch(annotations: Sequence[Annotation], boxes: DefaultBoxSet, iou_threshold: float = 0.5):
    enc = [encode_gt(a, boxes, iou_threshold) for a in annotations]
    return (np.stack([e[0] for e in enc]), np.stack([e[1] for e in enc]), np.stack([e[2] for e in enc]))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: ToyDetector, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "theta": model.parameter_vector().detach().cpu(),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Return ``(model, extra)``; rejects files written by another format version."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {CHECKPOINT_VERSION}")
    model = ToyDetector(ArchConfig(**payload["arch"])).to(payload["theta"].dtype)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
