"""Warmup + poly learning-rate schedule and momentum SGD with selective weight decay."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .blocks import ParameterError
from .config import OptimizerConfig, ScheduleConfig
from .losses import NumericError


def lr_at(step: int, oc: OptimizerConfig, sc: ScheduleConfig) -> float:
    """Linear warmup from 0 to ``lr0``, then ``lr0 * (1 - progress) ** poly_power``."""
    if not 0 <= step <= sc.total_steps:
        raise ParameterError(f"step {step} outside [0, {sc.total_steps}]")
    if step < sc.warmup_steps:
        return oc.lr0 * step / sc.warmup_steps
    progress = (step - sc.warmup_steps) / (sc.total_steps - sc.warmup_steps)
    return oc.lr0 * (1.0 - progress) ** sc.poly_power


def decays(name: str, param: torch.Tensor) -> bool:
    """Weight decay applies to weight matrices and kernels, not biases or norm affine terms."""
    return param.ndim > 1


def sgd_step(params: list[torch.Tensor], grads: list[torch.Tensor | None],
             buffers: list[torch.Tensor], lr: float, oc: OptimizerConfig,
             decay_mask: list[bool] | None = None, names: list[str] | None = None) -> None:
    """In-place update: ``buf = m*buf + (g + wd*p)``; ``p -= lr*buf``."""
    if not len(params) == len(grads) == len(buffers):
        raise ParameterError("params, grads and buffers are not aligned")
    decay_mask = decay_mask or [True] * len(params)
    names = names or [str(i) for i in range(len(params))]
    with torch.no_grad():
        for name, p, g, buf, use_decay in zip(names, params, grads, buffers, decay_mask):
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            d = g + oc.weight_decay * p if use_decay and oc.weight_decay else g
            buf.mul_(oc.momentum).add_(d)
            p.sub_(lr * buf)


class MomentumSGD:
    """Holds the momentum buffers for a model's parameters."""

    def __init__(self, model: nn.Module, oc: OptimizerConfig):
        self.oc = oc
        named = list(model.named_parameters())
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.decay_mask = [decays(n, p) for n, p in named]
        self.buffers = [torch.zeros_like(p) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.buffers, lr, self.oc,
                 self.decay_mask, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {f"momentum.{n}": b for n, b in zip(self.names, self.buffers)}

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        for i, n in enumerate(self.names):
            self.buffers[i].copy_(state[f"momentum.{n}"])


def poly_schedule(total_steps: int, warmup_steps: int, poly_power: float) -> ScheduleConfig:
    warmup_steps = min(warmup_steps, max(total_steps - 1, 0))
    return ScheduleConfig(warmup_steps, max(total_steps, 1), poly_power)


def steps_per_epoch(n_items: int, batch: int) -> int:
    return math.ceil(n_items / batch)
