"""Supervised training, semi-supervised fine-tuning and cross-validation folds."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TextIO

import numpy as np
import torch

from . import metrics
from .blocks import ParameterError
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, DataError, base_augment
from .losses import LossBreakdown
from .network import HybridSegNet, build_model
from .optim import lr_at, poly_schedule, steps_per_epoch
from .semisup import (
    PseudoLabelStore,
    StateError,
    TrainState,
    make_teacher,
    one_hot,
    semisup_step,
    supervised_step,
)

log = logging.getLogger(__name__)


@dataclass
class FoldPlan:
    folds: list[list[int]]
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def split(self, k: int) -> tuple[list[int], list[int]]:
        """``(train, val)`` indices for fold ``k``."""
        val = self.folds[k]
        train = [i for j, fold in enumerate(self.folds) if j != k for i in fold]
        return train, val


def kfold_split(n_items: int, seed: int = 0, n_folds: int = 5) -> FoldPlan:
    if n_items < n_folds:
        raise ParameterError(f"need at least {n_folds} items for {n_folds}-fold CV, got {n_items}")
    order = np.random.default_rng(seed).permutation(n_items)
    return FoldPlan([sorted(chunk.tolist()) for chunk in np.array_split(order, n_folds)], seed)


class TrainLog:
    """Tab-separated training log: step lines (8 fields) and epoch lines (5 fields)."""

    def __init__(self, stream: TextIO | None = None):
        self.stream = stream
        self.lines: list[str] = []

    def _emit(self, fields) -> None:
        line = "\t".join(repr(f) if isinstance(f, float) else str(f) for f in fields)
        self.lines.append(line)
        if self.stream is not None:
            self.stream.write(line + "\n")

    def step(self, step: int, epoch: int, lr: float, b: LossBreakdown) -> None:
        self._emit((step, epoch, float(lr), b.sup, b.cons, b.mix, b.fix, b.total))

    def epoch(self, epoch: int, m: metrics.SegMetrics) -> None:
        self._emit((epoch, m.dsc, m.hd, m.sen, m.spc))


@torch.no_grad()
def predict(model: torch.nn.Module, images: torch.Tensor, batch: int = 8) -> torch.Tensor:
    model.eval()
    outs = [model(images[i:i + batch]) for i in range(0, len(images), batch)]
    return torch.cat(outs)


def evaluate_model(model: torch.nn.Module, dataset: Dataset, batch: int = 8) -> list[metrics.SegMetrics]:
    if not dataset.labeled:
        raise DataError("evaluation needs a labeled dataset")
    probs = predict(model, dataset.images, batch).numpy()
    pred = metrics.probs_to_mask(probs)
    gt = dataset.masks.numpy()
    return [metrics.evaluate(p, g) for p, g in zip(pred, gt)]


def snapshot(state: TrainState, cfg: ExperimentConfig, data_rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(
        config=copy.deepcopy(cfg),
        student={k: v.detach().clone() for k, v in state.student.state_dict().items()},
        teacher={k: v.detach().clone() for k, v in state.teacher.state_dict().items()},
        momentum={k: v.clone() for k, v in state.optimizer.state_dict().items()},
        pseudo=PseudoLabelStore(state.pseudo.ema_alpha, state.pseudo.T,
                                {k: v.clone() for k, v in state.pseudo.labels.items()},
                                dict(state.pseudo.visits)),
        step=state.step,
        semi_step=state.semi_step,
        epoch=state.epoch,
        best_val_dsc=state.best_val_dsc,
        rng_state=copy.deepcopy(state.rng.bit_generator.state),
        data_rng_state=copy.deepcopy(data_rng.bit_generator.state),
    )


def model_from_checkpoint(ckpt: Checkpoint, which: str = "student") -> HybridSegNet:
    model = HybridSegNet(ckpt.config.net)
    model.load_state_dict(getattr(ckpt, which))
    return model.eval()


def restore_state(ckpt: Checkpoint, cfg: ExperimentConfig | None = None) -> tuple[TrainState, np.random.Generator]:
    """Rebuild the full training state (and data rng) stored in ``ckpt``."""
    cfg = cfg or ckpt.config
    if cfg.net != ckpt.config.net:
        raise StateError("checkpoint network config does not match the requested config")
    student = model_from_checkpoint(ckpt)
    state = TrainState.create(student, cfg)
    state.teacher.load_state_dict(ckpt.teacher)
    if ckpt.momentum:
        state.optimizer.load_state_dict(ckpt.momentum)
    state.pseudo = PseudoLabelStore(ckpt.pseudo.ema_alpha, ckpt.pseudo.T,
                                    {k: v.clone() for k, v in ckpt.pseudo.labels.items()},
                                    dict(ckpt.pseudo.visits))
    state.step, state.semi_step, state.epoch = ckpt.step, ckpt.semi_step, ckpt.epoch
    state.best_val_dsc = ckpt.best_val_dsc
    if ckpt.rng_state:
        state.rng.bit_generator.state = ckpt.rng_state
    data_rng = np.random.default_rng()
    if ckpt.data_rng_state:
        data_rng.bit_generator.state = ckpt.data_rng_state
    return state, data_rng


def _labeled_batches(data: Dataset, batch: int, rng: np.random.Generator, augment: bool):
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        x, m = data.images[idx], data.masks[idx]
        if augment:
            pairs = [base_augment(xi, mi, rng) for xi, mi in zip(x, m)]
            x = torch.stack([p[0] for p in pairs])
            m = torch.stack([p[1] for p in pairs])
        yield x, one_hot(m, x.dtype)


class _UnlabeledCycle:
    """Endless shuffled passes over the unlabeled pool."""

    def __init__(self, data: Dataset, rng: np.random.Generator):
        self.data, self.rng = data, rng
        self.queue: list[int] = []

    def take(self, n: int) -> tuple[torch.Tensor, list[str]]:
        idx = []
        while len(idx) < n:
            if not self.queue:
                self.queue = self.rng.permutation(len(self.data)).tolist()
            idx.append(self.queue.pop(0))
        return self.data.images[idx], [self.data.ids[i] for i in idx]


@dataclass
class History:
    epochs: list[dict]

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


def _run_phase(state: TrainState, cfg: ExperimentConfig, labeled: Dataset, val: Dataset,
               epochs: int, data_rng: np.random.Generator, unlabeled: Dataset | None = None,
               unl_rng: np.random.Generator | None = None, train_log: TrainLog | None = None,
               select_best: bool = True) -> tuple[Checkpoint | None, History]:
    """Shared epoch loop; ``unlabeled`` switches from supervised to mean-teacher steps."""
    batch = cfg.optim.batch
    spe = steps_per_epoch(len(labeled), batch)
    schedule = poly_schedule(epochs * spe, cfg.train.warmup_epochs * spe, cfg.poly_power)
    cycle = _UnlabeledCycle(unlabeled, unl_rng) if unlabeled is not None else None
    best, history, local_step = None, [], 0
    for _ in range(epochs):
        state.epoch += 1
        losses = []
        for x, y in _labeled_batches(labeled, batch, data_rng, cfg.train.base_augment):
            lr = lr_at(local_step, cfg.optim, schedule)
            if cycle is None:
                b = supervised_step(state, x, y, cfg, lr)
            else:
                x_u, ids = cycle.take(len(x))
                b = semisup_step(state, x, y, x_u, ids, cfg, lr)
            local_step += 1
            losses.append(b.total)
            if train_log is not None:
                train_log.step(state.step, state.epoch, lr, b)
        val_metrics = metrics.mean_metrics(evaluate_model(state.student, val))
        if train_log is not None:
            train_log.epoch(state.epoch, val_metrics)
        history.append({"epoch": state.epoch, "loss": float(np.mean(losses)),
                        **{f"val_{k}": v for k, v in metrics.to_dict(val_metrics).items()}})
        log.debug("epoch %d loss %.4f val dsc %.4f", state.epoch, history[-1]["loss"], val_metrics.dsc)
        if select_best and val_metrics.dsc > state.best_val_dsc:
            state.best_val_dsc = val_metrics.dsc
            best = snapshot(state, cfg, data_rng)
    return best, History(history)


def train_supervised(train: Dataset, val: Dataset, cfg: ExperimentConfig, epochs: int | None = None,
                     seed: int | None = None, train_log: TrainLog | None = None):
    """Train from scratch; returns ``(best checkpoint, history, final state)``."""
    if len(train) == 0 or not train.labeled:
        raise DataError("supervised training needs a non-empty labeled dataset")
    seed = cfg.train.seed if seed is None else seed
    epochs = cfg.train.epochs if epochs is None else epochs
    state = TrainState.create(build_model(cfg.net, seed), cfg, seed)
    data_rng = np.random.default_rng([seed, 1])
    best, history = _run_phase(state, cfg, train, val, epochs, data_rng, train_log=train_log)
    return best, history, state


def _finetune_state(ckpt: Checkpoint, cfg: ExperimentConfig, seed: int):
    if cfg.net != ckpt.config.net:
        raise StateError("checkpoint network config does not match the requested config")
    student = model_from_checkpoint(ckpt).train()
    state = TrainState.create(student, cfg, seed)
    state.teacher = make_teacher(student)
    state.step, state.epoch = ckpt.step, ckpt.epoch
    return state


def finetune_semisup(ckpt: Checkpoint, labeled: Dataset, unlabeled: Dataset, val: Dataset,
                     cfg: ExperimentConfig, epochs: int | None = None, seed: int | None = None,
                     train_log: TrainLog | None = None):
    """Mean-teacher fine-tuning from a supervised checkpoint.

    Student and teacher both start from the checkpoint's student weights; the
    best checkpoint is selected over fine-tuning epochs only.
    """
    if len(unlabeled) == 0:
        raise DataError("semi-supervised fine-tuning needs unlabeled images")
    seed = cfg.train.seed if seed is None else seed
    epochs = cfg.train.finetune_epochs if epochs is None else epochs
    state = _finetune_state(ckpt, cfg, seed)
    data_rng = np.random.default_rng([seed, 2])
    unl_rng = np.random.default_rng([seed, 3])
    best, history = _run_phase(state, cfg, labeled, val, epochs, data_rng, unlabeled, unl_rng,
                               train_log=train_log)
    return best, history, state


def continue_supervised(ckpt: Checkpoint, labeled: Dataset, val: Dataset, cfg: ExperimentConfig,
                        epochs: int | None = None, seed: int | None = None,
                        train_log: TrainLog | None = None):
    """Supervised counterpart of :func:`finetune_semisup` (same rng streams and schedule)."""
    seed = cfg.train.seed if seed is None else seed
    epochs = cfg.train.finetune_epochs if epochs is None else epochs
    state = _finetune_state(ckpt, cfg, seed)
    data_rng = np.random.default_rng([seed, 2])
    best, history = _run_phase(state, cfg, labeled, val, epochs, data_rng, train_log=train_log)
    return best, history, state


def ablation_config(cfg: ExperimentConfig, terms: str) -> ExperimentConfig:
    """Zero the weights of every loss term not listed in ``terms`` (subset of ``s,c,m,f``)."""
    chosen = {t.strip() for t in terms.split(",") if t.strip()}
    if not chosen <= {"s", "c", "m", "f"} or "s" not in chosen:
        raise ParameterError(f"loss terms must include 's' and be drawn from s,c,m,f; got {terms!r}")
    lw = replace(cfg.losses,
                 w_c=cfg.losses.w_c if "c" in chosen else 0.0,
                 w_m=cfg.losses.w_m if "m" in chosen else 0.0,
                 w_f=cfg.losses.w_f if "f" in chosen else 0.0)
    return replace(cfg, losses=lw)


def cross_validate(data: Dataset, cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   epochs: int | None = None, unlabeled: Dataset | None = None,
                   finetune_epochs: int | None = None):
    """Per-fold supervised training (and optional fine-tuning); returns per-fold val metrics."""
    plan = kfold_split(len(data), cfg.train.seed, cfg.train.n_folds)
    per_fold = {}
    for k in range(plan.n_folds):
        train_idx, val_idx = plan.split(k)
        train, val = data.subset(train_idx), data.subset(val_idx)
        best, _, _ = train_supervised(train, val, cfg, epochs)
        if unlabeled is not None:
            pool = unlabeled
            if len(unlabeled) > len(train):
                # 1:1 labeled:unlabeled, rotated so folds see different slices
                start = k * len(train)
                pool = unlabeled.subset([(start + i) % len(unlabeled) for i in range(len(train))])
            tuned, _, _ = finetune_semisup(best, train, pool, val, cfg, finetune_epochs)
            best = tuned or best
        per_fold[f"fold{k}"] = evaluate_model(model_from_checkpoint(best), val)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(best, Path(out_dir) / f"fold{k}.ckpt")
    return per_fold
