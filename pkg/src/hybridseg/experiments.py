"""Desk-scale experiments on synthetic data, shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import Dataset, SyntheticSpec, gen_synthetic, load_dataset
from .trainer import (
    TrainLog,
    evaluate_model,
    finetune_semisup,
    model_from_checkpoint,
    snapshot,
    train_supervised,
)


def synthetic(out_dir: str | Path, n_images: int, seed: int, size: int = 64,
              labeled: bool = True, prefix: str = "img") -> Dataset:
    spec = SyntheticSpec(n_images=n_images, size=size, seed=seed, labeled=labeled, prefix=prefix)
    gen_synthetic(spec, out_dir)
    return load_dataset(Path(out_dir) / "manifest.tsv")


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.convolve(values, np.ones(window) / window, mode="valid")


def mean_dsc(ckpt_or_model, data: Dataset) -> float:
    model = model_from_checkpoint(ckpt_or_model) if isinstance(ckpt_or_model, Checkpoint) else ckpt_or_model
    return metrics.mean_metrics(evaluate_model(model, data)).dsc


def overfit_config() -> ExperimentConfig:
    """Desk network, full-batch steps on 8 images, no geometric augmentation."""
    cfg = ExperimentConfig()
    cfg.optim.batch = 8
    cfg.train.base_augment = False
    return cfg


@dataclass
class OverfitResult:
    final: Checkpoint
    train_dsc: float
    losses: list[float]
    steps: int

    @property
    def ma_non_increasing(self) -> bool:
        ma = moving_average(self.losses, 20)
        return bool(np.all(np.diff(ma) <= 0))


def overfit_run(data: Dataset, steps: int = 300, cfg: ExperimentConfig | None = None) -> OverfitResult:
    """Fit the training set itself; one optimiser step per epoch at full batch."""
    cfg = cfg or overfit_config()
    epochs = math.ceil(steps / math.ceil(len(data) / cfg.optim.batch))
    _, history, state = train_supervised(data, data, cfg, epochs)
    final = snapshot(state, cfg, np.random.default_rng(0))
    return OverfitResult(final, mean_dsc(state.student, data), history.column("loss"), state.step)


@dataclass
class DirectionResult:
    supervised_dsc: float
    finetuned_dsc: float        # returned best-validation checkpoint
    final_dsc: float            # student after the last fine-tuning step
    steps: int
    breakdown_finite: bool
    log: list[str] = field(default_factory=list)


def semisup_direction(root: str | Path, n_labeled: int = 4, n_unlabeled: int = 12, n_val: int = 16,
                      sup_epochs: int = 150, steps: int = 200, seed: int = 0) -> DirectionResult:
    """Supervised training on a few labeled images, then mean-teacher fine-tuning.

    Compares held-out DSC before and after fine-tuning.
    """
    root = Path(root)
    labeled = synthetic(root / "labeled", n_labeled, seed=seed + 100)
    unlabeled = synthetic(root / "unlabeled", n_unlabeled, seed=seed + 200, labeled=False, prefix="u")
    val = synthetic(root / "val", n_val, seed=seed + 300, prefix="v")
    cfg = ExperimentConfig()
    cfg.train.seed = seed
    sup, _, _ = train_supervised(labeled, val, cfg, sup_epochs)
    steps_per_epoch = math.ceil(len(labeled) / cfg.optim.batch)
    log = TrainLog()
    tuned, _, state = finetune_semisup(copy.deepcopy(sup), labeled, unlabeled, val, cfg,
                                       math.ceil(steps / steps_per_epoch), train_log=log)
    rows = [line.split("\t") for line in log.lines if line.count("\t") == 7]
    finite = all(math.isfinite(float(v)) for row in rows for v in row[3:])
    return DirectionResult(
        supervised_dsc=mean_dsc(sup, val),
        finetuned_dsc=mean_dsc(tuned, val) if tuned is not None else float("nan"),
        final_dsc=mean_dsc(state.student, val),
        steps=state.semi_step,
        breakdown_finite=finite and len(rows) == state.semi_step,
        log=log.lines,
    )
