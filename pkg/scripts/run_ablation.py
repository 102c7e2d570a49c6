"""Run the aggregation x mixture ablation grid and print the summary table.

Each grid cell is an independent training run with a derived seed; the
summary lands in <out>/ablation.csv and <out>/ablation.txt.
"""

import argparse
import os
import sys

from mixsiam.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(ROOT, "configs", "ablation_grid.json"))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=None)
    return ap.parse_args()


if __name__ == "__main__":
    args = parse_args()
    argv = ["ablate", "--config", args.config, "--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    sys.exit(main(argv))
