"""Supervised training on 4 labeled images, then mean-teacher fine-tuning with 12 unlabeled.

Also runs the same number of extra steps with supervised loss only, so the gain
attributable to the unlabeled terms can be separated from extra training.
"""

import argparse
import math
import tempfile
from pathlib import Path

from hybridseg.config import ExperimentConfig
from hybridseg.experiments import mean_dsc, semisup_direction, synthetic
from hybridseg.trainer import continue_supervised, train_supervised


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--sup-epochs", type=int, default=150)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = parser.parse_args()
    print("seed\tsupervised\tsemisup_best\tsemisup_final\tsup_only_final")
    for seed in args.seeds:
        with tempfile.TemporaryDirectory() as tmp:
            r = semisup_direction(tmp, sup_epochs=args.sup_epochs, steps=args.steps, seed=seed)
            # same data (generator is deterministic), supervised-only continuation
            root = Path(tmp)
            labeled = synthetic(root / "labeled", 4, seed=seed + 100)
            val = synthetic(root / "val", 16, seed=seed + 300, prefix="v")
            cfg = ExperimentConfig()
            cfg.train.seed = seed
            sup, _, _ = train_supervised(labeled, val, cfg, args.sup_epochs)
            epochs = math.ceil(args.steps / math.ceil(len(labeled) / cfg.optim.batch))
            _, _, state = continue_supervised(sup, labeled, val, cfg, epochs)
            baseline = mean_dsc(state.student, val)
        print(f"{seed}\t{r.supervised_dsc:.4f}\t{r.finetuned_dsc:.4f}\t{r.final_dsc:.4f}\t{baseline:.4f}")


if __name__ == "__main__":
    main()
