"""Mean-teacher training engine: teacher EMA, label guessing, sharpening,
pseudo-label refinement and the composed semi-supervised step."""

from __future__ import annotations

import copy
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .augment import strong_augment, weak_augment
from .blocks import DimensionError, ParameterError
from .config import ExperimentConfig
from .losses import LossBreakdown
from .network import restore_bn_momentum, set_bn_momentum
from .optim import MomentumSGD


class StateError(RuntimeError):
    pass


def one_hot(mask: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """``(B, H, W)`` {0,1} mask -> ``(B, 2, H, W)`` probabilities."""
    fg = mask.to(dtype)
    return torch.stack([1 - fg, fg], dim=1)


def make_teacher(student: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher.eval()


def update_teacher(teacher: nn.Module, student: nn.Module, decay: float) -> None:
    """``teacher <- decay*teacher + (1-decay)*student`` for parameters and float buffers."""
    t_params, s_params = dict(teacher.named_parameters()), dict(student.named_parameters())
    t_bufs, s_bufs = dict(teacher.named_buffers()), dict(student.named_buffers())
    if t_params.keys() != s_params.keys() or t_bufs.keys() != s_bufs.keys():
        raise StateError("teacher and student parameter names differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            tp.mul_(decay).add_(s_params[name].detach(), alpha=1 - decay)
        for name, tb in t_bufs.items():
            if tb.is_floating_point():
                tb.mul_(decay).add_(s_bufs[name], alpha=1 - decay)
            else:
                tb.copy_(s_bufs[name])


def teacher_decay_at(step: int, final: float = 0.99, start: float = 0.9, ramp: int = 100) -> float:
    if ramp <= 0:
        return final
    return start + (final - start) * min(step / ramp, 1.0)


def guess_labels(p_u: torch.Tensor, p_w: list[torch.Tensor]) -> torch.Tensor:
    """Average of the clean prediction and the K augmented-view predictions."""
    for view in p_w:
        if view.shape != p_u.shape:
            raise DimensionError(f"shape mismatch: {tuple(p_u.shape)} vs {tuple(view.shape)}")
    return (sum(p_w) + p_u) / (len(p_w) + 1)


def sharpen(p: torch.Tensor, T: float) -> torch.Tensor:
    """Per-pixel temperature sharpening over the class axis (dim 1)."""
    if T <= 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    powered = p ** (1.0 / T)
    return powered / powered.sum(dim=1, keepdim=True)


@dataclass
class PseudoLabelStore:
    """Running pseudo label per unlabeled image id, blended with an EMA on every visit."""

    ema_alpha: float = 0.9
    T: float = 0.5
    labels: dict[str, torch.Tensor] = field(default_factory=dict)
    visits: dict[str, int] = field(default_factory=dict)

    def refine(self, image_id: str, sharpened: torch.Tensor) -> torch.Tensor:
        previous = self.labels.get(image_id)
        if previous is None:
            value = sharpened.detach().clone()
        else:
            value = self.ema_alpha * previous + (1 - self.ema_alpha) * sharpened.detach()
        self.labels[image_id] = value
        self.visits[image_id] = self.visits.get(image_id, 0) + 1
        return value

    def refine_batch(self, ids: list[str], sharpened: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.refine(i, s) for i, s in zip(ids, sharpened)])


def refine_pseudo(store: PseudoLabelStore, image_id: str, sharpened: torch.Tensor) -> torch.Tensor:
    return store.refine(image_id, sharpened)


@dataclass
class TrainState:
    student: nn.Module
    teacher: nn.Module
    optimizer: MomentumSGD
    pseudo: PseudoLabelStore
    rng: np.random.Generator
    step: int = 0
    semi_step: int = 0
    epoch: int = 0
    best_val_dsc: float = -1.0

    @classmethod
    def create(cls, student: nn.Module, cfg: ExperimentConfig, seed: int = 0) -> "TrainState":
        return cls(
            student=student,
            teacher=make_teacher(student),
            optimizer=MomentumSGD(student, cfg.optim),
            pseudo=PseudoLabelStore(cfg.losses.ema_alpha, cfg.losses.T),
            rng=np.random.default_rng(seed),
        )


@contextmanager
def frozen_bn_stats(model: nn.Module):
    """Train-mode forward passes that use batch statistics without updating running ones."""
    previous = set_bn_momentum(model, 0.0)
    try:
        yield
    finally:
        restore_bn_momentum(model, previous)


def _apply_update(state: TrainState, loss: torch.Tensor, lr: float) -> None:
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step(lr)


def supervised_step(state: TrainState, x: torch.Tensor, y: torch.Tensor,
                    cfg: ExperimentConfig, lr: float) -> LossBreakdown:
    """One optimiser step on the supervised loss alone (teacher untouched)."""
    state.student.train()
    l_s = losses.supervised_loss(state.student(x), y, cfg.losses, cfg.tversky)
    zero = torch.zeros((), dtype=l_s.dtype)
    loss, breakdown = losses.total_loss(l_s, zero, zero, zero, cfg.losses)
    _apply_update(state, loss, lr)
    state.step += 1
    return breakdown


def semisup_step(state: TrainState, x: torch.Tensor, y: torch.Tensor, x_u: torch.Tensor,
                 ids: list[str], cfg: ExperimentConfig, lr: float) -> LossBreakdown:
    """One mean-teacher step on a labeled batch ``(x, y)`` and unlabeled batch ``x_u``.

    ``y`` holds one-hot targets ``(B, 2, H, W)``; ``ids`` names each unlabeled image.
    Only the labeled forward pass updates BatchNorm running statistics.
    """
    if ids is None or len(ids) != x_u.shape[0] or any(not i for i in ids):
        raise StateError("every unlabeled image needs an id")
    lw, student, teacher = cfg.losses, state.student, state.teacher
    student.train()
    teacher.eval()

    p_l = student(x)
    with frozen_bn_stats(student):
        p_u = student(x_u)

    with torch.no_grad():
        views = weak_augment(x_u, cfg.augment, state.rng, lw.K)
        p_w = [teacher(v) for v in views]
        guess = guess_labels(p_u.detach(), p_w)
        y_u = state.pseudo.refine_batch(ids, sharpen(guess, lw.T))

    l_s = losses.supervised_loss(p_l, y, lw, cfg.tversky)
    l_c = losses.consistency_loss(p_u, p_w)

    mix, y2 = losses.mixup_pair(torch.cat([x, x_u]), torch.cat([y, y_u]), lw.mix_alpha, state.rng)
    y1 = torch.cat([y, y_u])
    with frozen_bn_stats(student):
        p_mix = student(mix.inputs)
    l_m = losses.mixup_loss(p_mix, y1, y2, mix.lam)

    x_s, _ = strong_augment(x_u, cfg.augment, state.rng)
    with frozen_bn_stats(student):
        p_s = student(x_s)
    l_f = losses.fix_loss(p_s, y_u)

    loss, breakdown = losses.total_loss(l_s, l_c, l_m, l_f, lw)
    _apply_update(state, loss, lr)
    decay = teacher_decay_at(state.semi_step, cfg.train.teacher_decay, cfg.train.teacher_decay_start,
                             cfg.train.teacher_ramp_steps)
    update_teacher(teacher, student, decay)
    state.step += 1
    state.semi_step += 1
    return breakdown
