"""Command-line entry point: ``hybridseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .blocks import DimensionError, ParameterError
from .checkpoint import FormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import DataError, Dataset, SyntheticSpec, gen_synthetic, load_dataset, read_pgm, write_pgm
from .losses import NumericError
from .semisup import StateError
from .trainer import (
    TrainLog,
    ablation_config,
    evaluate_model,
    finetune_semisup,
    kfold_split,
    model_from_checkpoint,
    predict,
    train_supervised,
)

_EXPECTED = (ConfigError, DataError, FormatError, StateError, NumericError, ParameterError,
             DimensionError, OSError)


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _fold_split(data: Dataset, cfg: ExperimentConfig, fold: int | None) -> tuple[Dataset, Dataset]:
    if fold is None:
        return data, data
    plan = kfold_split(len(data), cfg.train.seed, cfg.train.n_folds)
    if not 0 <= fold < plan.n_folds:
        raise ParameterError(f"fold must lie in [0, {plan.n_folds - 1}]")
    train_idx, val_idx = plan.split(fold)
    return data.subset(train_idx), data.subset(val_idx)


def _write_history(out: Path, history) -> None:
    (out / "history.json").write_text(json.dumps(history.epochs, indent=1) + "\n", encoding="utf-8")


def cmd_gen_data(args) -> None:
    spec = SyntheticSpec.load(args.spec)
    records = gen_synthetic(spec, args.out)
    print(f"wrote {len(records)} images to {args.out}/manifest.tsv")


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    train, val = _fold_split(load_dataset(args.data), cfg, args.fold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.tsv", "w", encoding="utf-8") as stream:
        best, history, _ = train_supervised(train, val, cfg, args.epochs, train_log=TrainLog(stream))
    save_checkpoint(best, out / "best.ckpt")
    _write_history(out, history)
    print(f"best val DSC {best.best_val_dsc:.4f} -> {out / 'best.ckpt'}")


def _finetune(args, cfg: ExperimentConfig) -> None:
    ckpt = load_checkpoint(args.ckpt)
    labeled, val = _fold_split(load_dataset(args.labeled), cfg, args.fold)
    if args.val:
        val = load_dataset(args.val)
    unlabeled = load_dataset(args.unlabeled)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.tsv", "w", encoding="utf-8") as stream:
        best, history, state = finetune_semisup(ckpt, labeled, unlabeled, val, cfg, args.epochs,
                                                train_log=TrainLog(stream))
    if best is None:
        raise StateError("fine-tuning produced no checkpoint (zero epochs?)")
    save_checkpoint(best, out / "best.ckpt")
    _write_history(out, history)
    per_case = evaluate_model(model_from_checkpoint(best), val)
    rows = [(getattr(args, "label", None) or "finetune", metrics.mean_metrics(per_case))]
    metrics.write_report(rows, out / "report.tsv")
    print(f"best val DSC {best.best_val_dsc:.4f} -> {out / 'best.ckpt'}")


def cmd_finetune(args) -> None:
    _finetune(args, _load_config(args.config))


def cmd_ablate(args) -> None:
    cfg = ablation_config(_load_config(args.config), args.losses)
    args.label = "L_" + "+L_".join(t.strip() for t in args.losses.split(","))
    _finetune(args, cfg)


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    per_case = evaluate_model(model_from_checkpoint(ckpt), data)
    rows = list(zip(data.ids, per_case)) + [("mean", metrics.mean_metrics(per_case))]
    metrics.write_report(rows, args.report)
    print(metrics.format_report(rows[-1:]), end="")


def cmd_predict(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    image = read_pgm(args.image)
    x = torch.from_numpy(image.astype(np.float32) / 255.0)[None, None]
    mask = metrics.probs_to_mask(predict(model, x).numpy())[0]
    write_pgm(args.out, (mask * 255).astype(np.uint8))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic lesion dataset")
    p.add_argument("--spec", required=True, help="JSON synthetic-data spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="supervised training on one cross-validation fold")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="labeled manifest")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("finetune", cmd_finetune, "semi-supervised fine-tuning"),
                                 ("ablate", cmd_ablate, "fine-tuning with a subset of loss terms")):
        p = sub.add_parser(name, help=helptext)
        if name == "ablate":
            p.add_argument("--losses", required=True, help="comma list drawn from s,c,m,f")
        p.add_argument("--config", required=name == "finetune")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--labeled", required=True)
        p.add_argument("--unlabeled", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--fold", type=int, help="restrict --labeled to this fold's training split")
        p.add_argument("--val", help="validation manifest (default: fold split or --labeled)")
        p.add_argument("--epochs", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one PGM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except _EXPECTED as exc:
        print(f"hybridseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
