"""5-fold cross-validation on synthetic data, optionally with mean-teacher fine-tuning per fold."""

import argparse
import tempfile
from pathlib import Path

from hybridseg import metrics
from hybridseg.config import ExperimentConfig
from hybridseg.experiments import synthetic
from hybridseg.trainer import cross_validate


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="JSON experiment config (default: desk config)")
    parser.add_argument("--images", type=int, default=20)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--finetune-epochs", type=int, default=0)
    parser.add_argument("--out", help="directory for per-fold checkpoints and report.tsv")
    args = parser.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    with tempfile.TemporaryDirectory() as tmp:
        data = synthetic(Path(tmp) / "lab", args.images, seed=10)
        unlabeled = None
        if args.finetune_epochs:
            unlabeled = synthetic(Path(tmp) / "unl", args.images, seed=11, labeled=False, prefix="u")
        per_fold = cross_validate(data, cfg, args.out, args.epochs, unlabeled,
                                  args.finetune_epochs or None)
    _, rows = metrics.aggregate(per_fold)
    print(metrics.format_report(rows), end="")
    if args.out:
        metrics.write_report(rows, Path(args.out) / "report.tsv")


if __name__ == "__main__":
    main()
