"""Unsupervised consistency losses: interpolation (Type-I / Type-II) and flip (CSD)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .detector import ConfigError, PredictionGrid
from .masks import TypeMasks

EPS = 1e-7


def kl_divergence(p, q, eps: float = EPS) -> torch.Tensor:
    """``sum_i p_i ln(p_i / q_i)`` over the last axis.

    Both arguments are clamped to ``eps`` inside the logarithms, so terms
    with ``p_i = 0`` vanish and ``kl(p, p)`` is exactly zero.
    """
    p, q = torch.as_tensor(p), torch.as_tensor(q)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return (p * (torch.log(p.clamp_min(eps)) - torch.log(q.clamp_min(eps)))).sum(-1)


def js_divergence(p, q, eps: float = EPS) -> torch.Tensor:
    p, q = torch.as_tensor(p), torch.as_tensor(q)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m, eps) + 0.5 * kl_divergence(q, m, eps)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any():
        return values.sum() * 0.0
    return values[mask].mean()


def _half_sq_l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return 0.25 * ((a - b) ** 2).sum(-1)


def type1_loss(grid_a: PredictionGrid, grid_b: PredictionGrid, grid_mix: PredictionGrid,
               lam: float, mask) -> torch.Tensor:
    """JS between the interpolated class predictions and the mixed-image prediction.

    Averaged over Type-I locations; both source grids stay differentiable.
    """
    target = lam * grid_a.cls + (1.0 - lam) * grid_b.cls
    return _masked_mean(js_divergence(target, grid_mix.cls), mask)


def type2_loss(grid_fg: PredictionGrid, grid_mix: PredictionGrid, mask) -> tuple[torch.Tensor, torch.Tensor]:
    """Pull the mixed prediction towards the (constant) foreground-source prediction.

    Returns ``(cls, loc)``: masked means of KL and of the quarter squared L2.
    """
    target = grid_fg.detach()
    cls = _masked_mean(kl_divergence(target.cls, grid_mix.cls), mask)
    loc = _masked_mean(_half_sq_l2(target.loc, grid_mix.loc), mask)
    return cls, loc


@dataclass
class IsdTerms:
    type1: torch.Tensor
    type2_a_cls: torch.Tensor
    type2_a_loc: torch.Tensor
    type2_b_cls: torch.Tensor
    type2_b_loc: torch.Tensor
    total: torch.Tensor

    @property
    def type2_cls(self):
        return self.type2_a_cls + self.type2_b_cls

    @property
    def type2_loc(self):
        return self.type2_a_loc + self.type2_b_loc

    @property
    def type2_a(self):
        return self.type2_a_cls + self.type2_a_loc

    @property
    def type2_b(self):
        return self.type2_b_cls + self.type2_b_loc


def isd_loss(grid_a: PredictionGrid, grid_b: PredictionGrid, grid_mix: PredictionGrid, lam: float,
             masks: TypeMasks, gamma1: float = 0.1, gamma2: float = 1.0,
             use_type1: bool = True, use_type2: bool = True,
             type2_cls: bool = True, type2_loc: bool = True) -> IsdTerms:
    """``gamma1 * L_I + gamma2 * (L_II^A + L_II^B)``.

    A disabled term is reported as exactly zero.
    """
    if gamma1 < 0 or gamma2 < 0:
        raise ConfigError("gamma1 and gamma2 must be non-negative")
    zero = grid_mix.cls.sum() * 0.0
    l1 = type1_loss(grid_a, grid_b, grid_mix, lam, masks.type1) if use_type1 else zero
    a_cls = a_loc = b_cls = b_loc = zero
    if use_type2:
        a_cls, a_loc = type2_loss(grid_a, grid_mix, masks.type2_a)
        b_cls, b_loc = type2_loss(grid_b, grid_mix, masks.type2_b)
        if not type2_cls:
            a_cls = b_cls = zero
        if not type2_loc:
            a_loc = b_loc = zero
    total = gamma1 * l1 + gamma2 * (a_cls + a_loc + b_cls + b_loc)
    return IsdTerms(l1, a_cls, a_loc, b_cls, b_loc, total)


def csd_loss(grid_a: PredictionGrid, grid_flip_corr: PredictionGrid, mask_a,
             use_cls: bool = True, use_loc: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Flip consistency on locations where the original image looks like an object.

    ``grid_flip_corr`` must already be mapped back with
    :func:`isdlab.augment.flip_grid_correspondence`.
    """
    zero = grid_a.cls.sum() * 0.0
    cls = _masked_mean(js_divergence(grid_a.cls, grid_flip_corr.cls), mask_a) if use_cls else zero
    loc = _masked_mean(_half_sq_l2(grid_a.loc, grid_flip_corr.loc), mask_a) if use_loc else zero
    return cls, loc


def weight_schedule(t: int, ramp_up: int, total: int, ramp_down: int) -> float:
    """Gaussian ramp-up, plateau at 1, Gaussian ramp-down over the last ``ramp_down`` steps."""
    if ramp_up < 0 or ramp_down < 0 or ramp_up + ramp_down > total:
        raise ConfigError(f"ramp lengths ({ramp_up}, {ramp_down}) do not fit in {total} iterations")
    if not 0 <= t <= total:
        raise ValueError(f"t={t} outside [0, {total}]")
    if t < ramp_up:
        return math.exp(-5.0 * (1.0 - t / ramp_up) ** 2)
    if ramp_down and t > total - ramp_down:
        return math.exp(-12.5 * (1.0 - (total - t) / ramp_down) ** 2)
    return 1.0


def total_loss(l_sup, csd, isd, w: float):
    return l_sup + w * (csd + isd)


@dataclass
class LossBreakdown:
    l_sup: float = 0.0
    l_csd_cls: float = 0.0
    l_csd_loc: float = 0.0
    l_type1: float = 0.0
    l_type2_cls: float = 0.0
    l_type2_loc: float = 0.0
    l_type2a: float = 0.0
    l_type2b: float = 0.0
    l_isd: float = 0.0
    l_total: float = 0.0
    n_type1: int = 0
    n_type2a: int = 0
    n_type2b: int = 0
    n_obj_a: int = 0

    def as_dict(self) -> dict:
        return asdict(self)
