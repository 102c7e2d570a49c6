"""Sweep the loss blend weight and plot accuracy against it.

Writes <out>/sweep.csv plus <out>/sweep.svg; the lambda endpoints are the
single-loss degenerations (0 = mixed branch only, 1 = plain two-view).
"""

import argparse
import os
import sys

from mixsiam.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(ROOT, "configs", "lambda_sweep.json"))
    ap.add_argument("--out", default="runs/lambda_sweep")
    ap.add_argument("--seed", type=int, default=None)
    return ap.parse_args()


if __name__ == "__main__":
    args = parse_args()
    argv = ["sweep-lambda", "--config", args.config, "--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    sys.exit(main(argv))
