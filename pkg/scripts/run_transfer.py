"""Desk-scale transfer experiment: pretrain on 8 synthetic source classes, adapt to 4 target classes.

Prints test accuracy of fine_tuning, feature_vector and from_scratch per seed,
then the medians.

    python3 scripts/run_transfer.py --seeds 5
"""

import argparse
import json

import numpy as np

from scenecnn.experiments import TransferSetup, run_transfer

MODALITIES = ("fine_tuning", "feature_vector", "from_scratch")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--target-iterations", type=int, default=TransferSetup.target_iterations)
    ap.add_argument("--scratch-iterations", type=int, default=TransferSetup.scratch_iterations)
    ap.add_argument("--json", help="also write per-seed results here")
    args = ap.parse_args()

    setup = TransferSetup(target_iterations=args.target_iterations, scratch_iterations=args.scratch_iterations)
    runs = []
    for seed in range(args.seeds):
        r = run_transfer(seed, setup)
        runs.append(r)
        print(f"seed {seed}: " + "  ".join(f"{m} {100 * r[m]:.1f}" for m in MODALITIES)
              + f"  ({r['seconds']:.0f}s)", flush=True)
    print("median: " + "  ".join(f"{m} {100 * np.median([r[m] for r in runs]):.1f}" for m in MODALITIES))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(runs, fh, indent=1)


if __name__ == "__main__":
    main()
