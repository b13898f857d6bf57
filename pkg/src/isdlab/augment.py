"""Flip / mix augmentations and the mixed-batch construction used in training."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .detector import ConfigError, DefaultBoxSet, PredictionGrid


def flip_image(image):
    """Mirror an ``HxWx3`` image (or an ``NxHxWx3`` batch) left-right."""
    if torch.is_tensor(image):
        return torch.flip(image, dims=(-2,))
    return np.ascontiguousarray(np.flip(np.asarray(image), axis=-2))


def mirror_index(boxes: DefaultBoxSet) -> np.ndarray:
    """Permutation ``k -> k'`` pairing each default box with its mirror image."""
    return _mirror_index(tuple(boxes.levels), boxes.boxes.tobytes())


@lru_cache(maxsize=16)
def _mirror_index(levels, raw) -> np.ndarray:
    boxes = np.frombuffer(raw, dtype=np.float64).reshape(-1, 4)
    perm = np.empty(len(boxes), dtype=np.int64)
    start = 0
    for h, w, d in levels:
        block = boxes[start:start + h * w * d].reshape(h, w, d, 4)
        for r in range(h):
            for c in range(w):
                mc = w - 1 - c
                for i in range(d):
                    b = block[r, c, i]
                    target = np.array([1.0 - b[0], b[1], b[2], b[3]])
                    cand = np.nonzero(np.all(np.isclose(block[r, mc], target, atol=1e-9), axis=1))[0]
                    if len(cand) == 0:
                        raise ConfigError(f"default box {(r, c, i)} has no horizontal mirror partner")
                    perm[start + (r * w + c) * d + i] = start + (r * w + mc) * d + cand[0]
        start += h * w * d
    perm.setflags(write=False)
    return perm


def flip_grid_correspondence(grid: PredictionGrid, boxes: DefaultBoxSet) -> PredictionGrid:
    """Re-index predictions of a flipped image onto the original image's locations.

    Class rows are permuted unchanged; ``dcx`` changes sign.
    """
    perm = torch.tensor(mirror_index(boxes))
    sign = torch.tensor([-1.0, 1.0, 1.0, 1.0], dtype=grid.loc.dtype)
    log_cls = None if grid.log_cls is None else grid.log_cls[..., perm, :]
    return PredictionGrid(grid.cls[..., perm, :], grid.loc[..., perm, :] * sign, log_cls)


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mix_images(a, b, lam: float):
    if a.shape != b.shape:
        raise ValueError(f"cannot mix shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return a.clone() if torch.is_tensor(a) else np.array(a, copy=True)
    if lam == 0.0:
        return b.clone() if torch.is_tensor(b) else np.array(b, copy=True)
    return lam * a + (1.0 - lam) * b


def half_rotation(n: int) -> np.ndarray:
    """``i -> (i + ceil(n/2)) mod n``; fixed-point free for ``n >= 2``."""
    if n < 2:
        raise ValueError("mixing needs a batch of at least 2 images")
    return (np.arange(n) + (n + 1) // 2) % n


@dataclass
class MixBatch:
    images: np.ndarray          # A
    flipped: np.ndarray         # h(A)
    shuffled: np.ndarray        # B = h(A)[perm]
    mixed: np.ndarray           # M = lam*A + (1-lam)*B
    lam: float
    perm: np.ndarray
    labeled: np.ndarray         # per-image flag, aligned with A
    annotations: list           # annotations of the labeled images, in order

    def __len__(self):
        return len(self.images)


def assemble_mix_batch(labeled_images, annotations, unlabeled_images, alpha: float,
                       rng: np.random.Generator, lam: float | None = None) -> MixBatch:
    """Stack labeled and unlabeled images into ``A`` and build ``A_flip``, ``B`` and ``M``.

    One ``lam`` is drawn per batch unless given explicitly.
    """
    labeled_images = np.asarray(labeled_images, dtype=np.float32).reshape(-1, *np.shape(labeled_images)[1:])
    parts = [labeled_images]
    if unlabeled_images is not None and len(unlabeled_images):
        parts.append(np.asarray(unlabeled_images, dtype=np.float32))
    a = np.concatenate(parts, axis=0)
    n = len(a)
    perm = half_rotation(n)
    if lam is None:
        lam = sample_lambda(alpha, rng)
    flipped = flip_image(a)
    b = flipped[perm]
    flags = np.zeros(n, dtype=bool)
    flags[:len(labeled_images)] = True
    return MixBatch(a, flipped, b, mix_images(a, b, lam), float(lam), perm, flags, list(annotations))
