"""Background-elimination objectness masks and Type-I / Type-II categorization."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .detector import PredictionGrid


def objectness_mask(grid: PredictionGrid | torch.Tensor) -> torch.Tensor:
    """1 where the most probable class is not background.

    A foreground class must strictly beat the background probability, so
    ties count as background. The result never carries gradient.
    """
    probs = grid.cls if isinstance(grid, PredictionGrid) else torch.as_tensor(grid)
    probs = probs.detach()
    return probs[..., 1:].max(dim=-1).values > probs[..., 0]


@dataclass
class TypeMasks:
    type1: torch.Tensor
    type2_a: torch.Tensor
    type2_b: torch.Tensor

    def counts(self) -> tuple[int, int, int]:
        return int(self.type1.sum()), int(self.type2_a.sum()), int(self.type2_b.sum())

    def restrict(self, keep: torch.Tensor) -> "TypeMasks":
        """Zero the masks of images where ``keep`` is False."""
        keep = torch.as_tensor(keep, dtype=torch.bool).reshape(-1, *([1] * (self.type1.ndim - 1)))
        return TypeMasks(self.type1 & keep, self.type2_a & keep, self.type2_b & keep)


def type_masks(mask_a, mask_b) -> TypeMasks:
    mask_a = torch.as_tensor(mask_a, dtype=torch.bool)
    mask_b = torch.as_tensor(mask_b, dtype=torch.bool)
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"mask shapes differ: {tuple(mask_a.shape)} vs {tuple(mask_b.shape)}")
    return TypeMasks(mask_a & mask_b, mask_a & ~mask_b, ~mask_a & mask_b)
