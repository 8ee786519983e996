#!/usr/bin/env python3
"""Eigenvalue-damping sensitivity sweep on the desk autoencoder: the grid
{1, 1e-1, 1e-2, 1e-3, 1e-4} at a fixed small learning rate shows the
trust-region effect (heavy damping slows directions with small curvature;
lowering it speeds convergence until instability takes over).

Usage: python scripts/run_epsilon_sweep.py [--out runs/epsilon]
"""

import argparse
import json
import sys
from pathlib import Path

from whitenet.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/epsilon")
    parser.add_argument("--learning-rate", type=float, default=0.001)
    args = parser.parse_args()

    cfg = {
        "grid": {"train.eigen_epsilon": [1.0, 0.1, 0.01, 0.001, 0.0001]},
        "train": {"learning_rate": args.learning_rate},
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "sweep.json"
    cfg_path.write_text(json.dumps(cfg))
    code = cli_main([
        "grid", "--preset", "ae-mnist-desk", "--config", str(cfg_path),
        "--out", str(out),
    ])
    if code == 0:
        print((out / "summary.csv").read_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
