"""Train the default small synthetic config and write probes + report.

Equivalent to `mixsiam train --config configs/synthetic_small.json --out ...`
with the paths pre-filled; the CLI does all the work.
"""

import argparse
import os
import sys

from mixsiam.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(ROOT, "configs", "synthetic_small.json"))
    ap.add_argument("--out", default="runs/synthetic_small")
    ap.add_argument("--seed", type=int, default=None)
    return ap.parse_args()


if __name__ == "__main__":
    args = parse_args()
    argv = ["train", "--config", args.config, "--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    sys.exit(main(argv))
