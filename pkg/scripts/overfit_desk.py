"""Fit the desk network to 8 synthetic images and report train DSC and the loss curve."""

import argparse
import tempfile

from hybridseg.experiments import moving_average, overfit_run, synthetic


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        data = synthetic(tmp, 8, seed=args.seed)
        result = overfit_run(data, args.steps)
    ma = moving_average(result.losses, 20)
    print(f"steps {result.steps}  train DSC {result.train_dsc:.4f}")
    print(f"loss first {result.losses[0]:.4f} last {result.losses[-1]:.4f}  "
          f"20-epoch MA non-increasing: {result.ma_non_increasing}")
    for i in range(0, len(ma), max(len(ma) // 10, 1)):
        print(f"  epoch {i + 20:4d}  MA loss {ma[i]:.4f}")


if __name__ == "__main__":
    main()
