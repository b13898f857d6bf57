"""Training loop: supervised, CSD, ISD and CSD+ISD objectives on the toy detector."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import assemble_mix_batch, flip_grid_correspondence, sample_lambda
from .detector import (Annotation, ArchConfig, ConfigError, ToyDetector, encode_batch, load_checkpoint,
                       multibox_loss, save_checkpoint)
from .evaluation import average_precision, postprocess
from .masks import objectness_mask, type_masks
from .ssl_losses import LossBreakdown, csd_loss, isd_loss, total_loss, weight_schedule

log = logging.getLogger(__name__)

MODES = ("supervised", "csd", "isd", "csd+isd")
TYPES = ("type1", "type2", "both")
STEP_COLUMNS = ["t", "w", "lam"] + [f.name for f in fields(LossBreakdown)]

# stream ids for the per-step generators
_LABELED, _UNLABELED, _LAMBDA = 1, 2, 3


@dataclass
class TrainConfig:
    mode: str = "csd+isd"
    types: str = "both"
    alpha: float = 100.0
    gamma1: float = 0.1
    gamma2: float = 1.0
    batch_size: int = 16
    labeled_fraction: float = 0.5
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_steps: tuple[int, ...] = (1300, 1700)
    lr_gamma: float = 0.1
    warmup: int = 200               # linear learning-rate warm-up length
    grad_clip: float | None = 5.0  # max global gradient norm
    max_iterations: int = 2000
    ramp_up: int = 500
    ramp_down: int = 0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 2000
    iou_threshold: float = 0.5
    neg_pos_ratio: float = 3.0
    isd_unlabeled_only: bool = False
    csd_cls: bool = True
    csd_loc: bool = True
    type2_cls: bool = True
    type2_loc: bool = True
    lam: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.types not in TYPES:
            raise ConfigError(f"types must be one of {TYPES}, got {self.types!r}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigError("gammas must be non-negative")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lam is not None and not 0 <= self.lam <= 1:
            raise ConfigError("lam must lie in [0, 1]")
        if self.warmup < 0 or (self.grad_clip is not None and not self.grad_clip > 0):
            raise ConfigError("warmup must be >= 0 and grad_clip positive")
        if self.ramp_up + self.ramp_down > max(self.max_iterations, 0) and self.max_iterations > 0:
            raise ConfigError("ramp lengths exceed max_iterations")

    @property
    def n_labeled(self) -> int:
        return max(1, int(round(self.batch_size * self.labeled_fraction)))

    @property
    def n_unlabeled(self) -> int:
        return self.batch_size - self.n_labeled

    @property
    def uses_csd(self) -> bool:
        return self.mode in ("csd", "csd+isd")

    @property
    def uses_isd(self) -> bool:
        return self.mode in ("isd", "csd+isd")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


@dataclass
class TrainState:
    model: ToyDetector
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    t: int = 0

    def step_rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, stream, self.t])


def init_state(config: TrainConfig, arch: ArchConfig | None = None) -> TrainState:
    torch.manual_seed(config.seed)
    model = ToyDetector(arch).to(config.torch_dtype)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    return TrainState(model, opt, config)


class EpochSampler:
    """Index stream over ``n`` items, reshuffled every epoch with wraparound.

    Position ``j`` of the stream is a pure function of ``(seed, stream, j)``.
    """

    def __init__(self, n: int, seed: int, stream: int):
        self.n, self.seed, self.stream = n, seed, stream
        self._cache = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._cache:
            self._cache = {epoch: np.random.default_rng([self.seed, self.stream, epoch]).permutation(self.n)}
        return self._cache[epoch]

    def take(self, start: int, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        for i, j in enumerate(range(start, start + count)):
            out[i] = self._perm(j // self.n)[j % self.n]
        return out


def _to_float(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    return images.astype(np.float32)


def _set_lr(state: TrainState) -> None:
    cfg = state.config
    lr = cfg.lr * cfg.lr_gamma ** sum(state.t >= s for s in cfg.lr_steps)
    if state.t < cfg.warmup:
        lr *= (state.t + 1) / cfg.warmup
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, labeled_images, annotations: Sequence[Annotation], unlabeled_images=None):
    """One parameter update; returns ``(state, LossBreakdown, w, lam)``."""
    cfg, model = state.config, state.model
    if len(labeled_images) == 0:
        raise ValueError("every step needs at least one labeled image")
    if len(annotations) != len(labeled_images):
        raise ValueError("one annotation per labeled image is required")
    model.train()
    _set_lr(state)
    boxes = model.default_boxes
    tgt = encode_batch([a.without_difficult() for a in annotations], boxes, cfg.iou_threshold)
    dtype = cfg.torch_dtype
    out = LossBreakdown()
    w, lam = 0.0, float("nan")
    n_l = len(labeled_images)

    if cfg.mode == "supervised":
        grid = model(torch.as_tensor(_to_float(labeled_images), dtype=dtype))
        l_sup = multibox_loss(grid, *tgt, neg_pos_ratio=cfg.neg_pos_ratio)
        loss = l_sup
    else:
        unl = None if unlabeled_images is None or len(unlabeled_images) == 0 else _to_float(unlabeled_images)
        lam = cfg.lam
        if lam is None and cfg.uses_isd:
            lam = sample_lambda(cfg.alpha, state.step_rng(_LAMBDA))
        batch = assemble_mix_batch(_to_float(labeled_images), annotations, unl, cfg.alpha, None,
                                   lam=1.0 if lam is None else lam)
        images = torch.as_tensor(batch.images, dtype=dtype)
        g_a = model(images)
        g_flip = model(torch.as_tensor(batch.flipped, dtype=dtype))
        l_sup = multibox_loss(g_a[:n_l], *tgt, neg_pos_ratio=cfg.neg_pos_ratio)
        m_a = objectness_mask(g_a)
        out.n_obj_a = int(m_a.sum())
        zero = l_sup * 0.0
        l_csd = zero
        if cfg.uses_csd:
            # CSD on the unlabeled part; on everything when the batch is all labeled
            sel = slice(n_l, None) if len(batch) > n_l else slice(None)
            corr = flip_grid_correspondence(g_flip, boxes)
            c_cls, c_loc = csd_loss(g_a[sel], corr[sel], m_a[sel], cfg.csd_cls, cfg.csd_loc)
            out.l_csd_cls, out.l_csd_loc = c_cls.item(), c_loc.item()
            l_csd = c_cls + c_loc
        l_isd = zero
        if cfg.uses_isd:
            g_mix = model(torch.as_tensor(batch.mixed, dtype=dtype))
            perm = torch.as_tensor(batch.perm)
            g_b = g_flip[perm]
            masks = type_masks(m_a, objectness_mask(g_b))
            if cfg.isd_unlabeled_only and len(batch) > n_l:
                masks = masks.restrict(~torch.as_tensor(batch.labeled))
            out.n_type1, out.n_type2a, out.n_type2b = masks.counts()
            terms = isd_loss(g_a, g_b, g_mix, batch.lam, masks, cfg.gamma1, cfg.gamma2,
                             use_type1=cfg.types in ("type1", "both"),
                             use_type2=cfg.types in ("type2", "both"),
                             type2_cls=cfg.type2_cls, type2_loc=cfg.type2_loc)
            out.l_type1 = terms.type1.item()
            out.l_type2_cls, out.l_type2_loc = terms.type2_cls.item(), terms.type2_loc.item()
            out.l_type2a, out.l_type2b = terms.type2_a.item(), terms.type2_b.item()
            out.l_isd = terms.total.item()
            l_isd = terms.total
        w = weight_schedule(state.t, cfg.ramp_up, cfg.max_iterations, cfg.ramp_down)
        loss = total_loss(l_sup, l_csd, l_isd, w)

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    out.l_sup, out.l_total = l_sup.item(), loss.item()
    state.t += 1
    return state, out, w, lam


def evaluate(model: ToyDetector, images, annotations: Sequence[Annotation], iou_threshold: float = 0.5,
             batch_size: int = 100, image_ids: Sequence[str] | None = None, return_detections: bool = False):
    """VOC all-point AP of ``model`` on a labeled image set."""
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(images))]
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    dets = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            grid = model(torch.as_tensor(_to_float(images[s:s + batch_size]), dtype=dtype))
            for j in range(len(grid)):
                dets.extend(postprocess(grid[j], model.default_boxes, ids[s + j]))
    model.train(was_training)
    result = average_precision(dets, dict(zip(ids, annotations)), model.arch.num_classes, iou_threshold)
    if return_detections:
        return result, dets
    return result


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def save_state(path, state: TrainState) -> None:
    save_checkpoint(path, state.model, {
        "t": state.t,
        "optimizer": state.optimizer.state_dict(),
        "config": asdict(state.config),
    })


def load_state(path) -> TrainState:
    model, extra = load_checkpoint(path)
    config = TrainConfig(**extra["config"])
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    opt.load_state_dict(extra["optimizer"])
    return TrainState(model, opt, config, t=int(extra["t"]))


def train(config: TrainConfig, labeled, unlabeled=None, eval_set=None, out_dir=None,
          arch: ArchConfig | None = None, state: TrainState | None = None, class_names=None):
    """Run ``config.max_iterations`` steps.

    ``labeled`` is ``(images, annotations)``, ``unlabeled`` an image array and
    ``eval_set`` ``(images, annotations)``. Returns ``(state, step_rows,
    eval_rows)``; when ``out_dir`` is given the rows are also streamed to
    ``train_metrics.csv`` / ``eval_metrics.csv`` and checkpoints are written.
    Passing a restored ``state`` continues from its iteration.
    """
    torch.set_num_threads(1)
    labeled_images, labeled_anns = labeled
    if len(labeled_images) == 0:
        raise ValueError("the labeled set is empty")
    if config.mode == "supervised":
        unlabeled = None
    if state is None:
        state = init_state(config, arch)
    n_l = config.n_labeled
    n_u = config.n_unlabeled if unlabeled is not None and len(unlabeled) else 0
    lab_sampler = EpochSampler(len(labeled_images), config.seed, _LABELED)
    unl_sampler = EpochSampler(len(unlabeled), config.seed, _UNLABELED) if n_u else None
    if config.mode != "supervised" and n_l + n_u < 2:
        raise ConfigError("mixing needs at least two images per batch")

    step_rows, eval_rows = [], []
    writer = _RunWriter(out_dir, config, class_names or [str(c) for c in range(1, state.model.arch.num_classes + 1)],
                        resume=state.t > 0)
    while state.t < config.max_iterations:
        t = state.t
        li = lab_sampler.take(t * n_l, n_l)
        ui = unl_sampler.take(t * n_u, n_u) if n_u else None
        _, br, w, lam = train_step(state, labeled_images[li], [labeled_anns[i] for i in li],
                                   None if ui is None else unlabeled[ui])
        row = {"t": t + 1, "w": w, "lam": lam, **br.as_dict()}
        step_rows.append(row)
        writer.step(row)
        if not np.isfinite(br.l_total):
            raise FloatingPointError(f"non-finite loss at iteration {t + 1}")
        done = state.t == config.max_iterations
        if eval_set is not None and (state.t % config.eval_every == 0 or done):
            res = evaluate(state.model, eval_set[0], eval_set[1], config.iou_threshold)
            erow = {"t": state.t, "mode": config.mode, "types": config.types, "alpha": config.alpha,
                    "seed": config.seed, **{f"ap_{k}": v for k, v in res["ap"].items()}, "map": res["map"]}
            eval_rows.append(erow)
            writer.eval(erow)
            log.info("t=%d mAP=%.4f", state.t, res["map"])
        if out_dir is not None and (state.t % config.checkpoint_every == 0 or done):
            save_state(Path(out_dir) / f"checkpoint_{state.t:06d}.pt", state)
    writer.close()
    return state, step_rows, eval_rows


class _RunWriter:
    def __init__(self, out_dir, config: TrainConfig, class_names, resume: bool = False):
        self.out = None if out_dir is None else Path(out_dir)
        self.class_names = list(class_names)
        self._eval_fh = self._step_fh = None
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(asdict(config), indent=1))
        mode = "a" if resume else "w"
        self._step_fh = open(self.out / "train_metrics.csv", mode, newline="")
        self._step = csv.writer(self._step_fh)
        self._eval_fh = open(self.out / "eval_metrics.csv", mode, newline="")
        self._eval = csv.writer(self._eval_fh)
        if not resume:
            self._step.writerow(STEP_COLUMNS)
            self._eval.writerow(["t", "mode", "types", "alpha", "seed"]
                                + [f"ap_{c}" for c in range(1, len(self.class_names) + 1)] + ["map"])

    def step(self, row):
        if self._step_fh:
            self._step.writerow([_fmt(row[c]) for c in STEP_COLUMNS])

    def eval(self, row):
        if self._eval_fh:
            self._eval.writerow([_fmt(v) for v in row.values()])
            self._eval_fh.flush()

    def close(self):
        for fh in (self._step_fh, self._eval_fh):
            if fh:
                fh.close()
