"""Overfit sanity check: MiniCaffeNet on 4 synthetic classes x 20 images should hit 99% training accuracy."""

import argparse

from scenecnn.experiments import run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--max-iterations", type=int, default=2000)
    args = ap.parse_args()
    reached = 0
    for seed in range(args.seeds):
        hit, acc = run_overfit(seed, args.max_iterations)
        reached += hit is not None
        print(f"seed {seed}: " + (f"99% at iteration {hit}" if hit else f"not reached, last accuracy {acc:.3f}"))
    print(f"{reached}/{args.seeds} seeds reached the target")


if __name__ == "__main__":
    main()
