#!/usr/bin/env python3
"""End-to-end desk experiment: generate the default benchmark, train the full
model, evaluate on unseen domains, then run the 4-variant ablation grid.

Usage: python scripts/run_full_experiment.py [RESULTS_DIR] [--seeds N]
"""

import argparse
import sys
from pathlib import Path

from care_lab import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("results", nargs="?", default="results")
    ap.add_argument("--seeds", default="5")
    args = ap.parse_args()
    root = Path(args.results)
    bench = root / "benchmark"
    steps = [
        ["synth-gen", "--out", str(bench), "--force", "true"],
        ["train", "--data", str(bench), "--out", str(root / "train_run")],
        ["eval-unseen", "--data", str(bench),
         "--checkpoint", str(root / "train_run" / "checkpoint.bin"),
         "--out", str(root / "eval_run")],
        ["ablate", "--data", str(bench), "--out", str(root / "ablation"),
         "--seeds", args.seeds],
    ]
    for argv in steps:
        print(f"\n$ care-lab {' '.join(argv)}", flush=True)
        rc = cli.main(argv)
        if rc != 0:
            return rc
    print(f"\nall reports under {root}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
