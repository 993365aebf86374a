"""Segmentation and semi-supervised objectives on per-pixel class probabilities.

All inputs are ``(batch, 2, H, W)`` probability tensors; channel 1 is foreground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .blocks import DimensionError, ParameterError
from .config import LossWeights, TverskyParams

LOG_CLAMP = 1e-12
TVERSKY_SMOOTH = 1.0


class NumericError(ArithmeticError):
    pass


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``-sum_c target_c * log(pred_c)``; soft targets allowed."""
    _check_shapes(pred, target)
    per_pixel = -(target * torch.log(pred.clamp_min(LOG_CLAMP))).sum(dim=1)
    return per_pixel.mean()


def tversky_loss(pred: torch.Tensor, target: torch.Tensor,
                 params: TverskyParams | None = None) -> torch.Tensor:
    """``1 - (TP+1) / (TP + a*FP + b*FN + 1)`` on soft foreground counts over the batch."""
    _check_shapes(pred, target)
    params = params or TverskyParams()
    p, g = pred[:, 1], target[:, 1]
    tp = (p * g).sum()
    fp = (p * (1 - g)).sum()
    fn = ((1 - p) * g).sum()
    index = (tp + TVERSKY_SMOOTH) / (tp + params.tv_alpha * fp + params.tv_beta * fn + TVERSKY_SMOOTH)
    return 1 - index


def supervised_loss(p_l: torch.Tensor, y: torch.Tensor, lw: LossWeights | None = None,
                    tp: TverskyParams | None = None) -> torch.Tensor:
    lw = lw or LossWeights()
    return lw.alpha1 * cross_entropy(p_l, y) + lw.alpha2 * tversky_loss(p_l, y, tp)


def consistency_loss(p_u: torch.Tensor, p_w: list[torch.Tensor]) -> torch.Tensor:
    """Squared difference between ``p_u`` and each view, averaged over views and entries."""
    if not p_w:
        raise ParameterError("consistency_loss needs at least one augmented prediction")
    for view in p_w:
        _check_shapes(p_u, view)
    return sum(((p_u - view) ** 2).mean() for view in p_w) / len(p_w)


@dataclass
class MixupBatch:
    inputs: torch.Tensor
    permutation: torch.Tensor
    lam: float


def mixup_pair(x1: torch.Tensor, y1: torch.Tensor, mix_alpha: float,
               rng: np.random.Generator, lam: float | None = None) -> tuple[MixupBatch, torch.Tensor]:
    """Mix ``x1`` with a shuffled copy of itself.

    Returns the mixed batch (with the shuffle permutation and ``lam' = max(lam, 1-lam)``)
    and ``y2``, the targets permuted the same way. ``lam`` overrides the Beta draw.
    """
    if x1.shape[0] != y1.shape[0]:
        raise DimensionError("inputs and targets have different batch sizes")
    n = x1.shape[0]
    if n < 2:
        raise ParameterError("mixup needs a batch of at least 2")
    perm = torch.from_numpy(rng.permutation(n))
    if lam is None:
        lam = float(rng.beta(mix_alpha, mix_alpha))
    lam = max(lam, 1.0 - lam)
    mixed = lam * x1 + (1.0 - lam) * x1[perm]
    return MixupBatch(mixed, perm, lam), y1[perm]


def mixup_loss(pred: torch.Tensor, y1: torch.Tensor, y2: torch.Tensor, lam: float) -> torch.Tensor:
    if not 0.5 <= lam <= 1.0:
        raise ParameterError(f"mixup weight must lie in [0.5, 1], got {lam}")
    return lam * cross_entropy(pred, y1) + (1.0 - lam) * cross_entropy(pred, y2)


def fix_loss(p_s: torch.Tensor, y_u: torch.Tensor) -> torch.Tensor:
    _check_shapes(p_s, y_u)
    return ((p_s - y_u) ** 2).mean()


@dataclass
class LossBreakdown:
    sup: float
    cons: float
    mix: float
    fix: float
    total: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return self.sup, self.cons, self.mix, self.fix, self.total


def total_loss(l_s, l_c, l_m, l_f, lw: LossWeights | None = None):
    """Weighted sum of the four terms; returns ``(loss, breakdown)``.

    Terms may be tensors (the returned loss keeps their graph) or floats.
    """
    lw = lw or LossWeights()
    terms = {"L_s": l_s, "L_c": l_c, "L_m": l_m, "L_f": l_f}
    raw = {}
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss term {name} = {v}")
        raw[name] = v
    loss = l_s + lw.w_c * l_c + lw.w_m * l_m + lw.w_f * l_f
    breakdown = LossBreakdown(raw["L_s"], raw["L_c"], raw["L_m"], raw["L_f"], float(loss.detach()) if torch.is_tensor(loss) else float(loss))
    return loss, breakdown
