#!/usr/bin/env python3
"""Convergence race on the desk autoencoder: momentum-SGD and the whitened
optimizer are each grid-tuned over learning rates {1e-1, 1e-2, 1e-3}, then
compared by the number of updates needed to reach the tuned SGD loss.

Usage: python scripts/run_autoencoder_race.py [--out runs/race] [--steps-sgd 2000]
"""

import argparse
import json
import sys
from pathlib import Path

from whitenet.cli import main as cli_main
from whitenet.metrics import read_metrics


def run_grid(optimizer, steps, out, extra=None):
    cfg = {
        "grid": {"train.learning_rate": [0.1, 0.01, 0.001]},
        "optimizer": optimizer,
        "train": {"max_updates": steps},
    }
    if extra:
        cfg["train"].update(extra)
    cfg_path = Path(out) / f"{optimizer}_grid.json"
    cfg_path.parent.mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(json.dumps(cfg))
    code = cli_main([
        "grid", "--preset", "ae-mnist-desk", "--config", str(cfg_path),
        "--out", str(Path(out) / optimizer),
    ])
    if code != 0:
        raise SystemExit(code)
    best = json.loads((Path(out) / optimizer / "best.json").read_text())
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/race")
    parser.add_argument("--steps-sgd", type=int, default=2000)
    parser.add_argument("--steps-whitened", type=int, default=1000)
    args = parser.parse_args()

    sgd_best = run_grid("momentum", args.steps_sgd, args.out, extra={"momentum": 0.9})
    target = sgd_best["final_train_loss"]
    prong_best = run_grid("prong", args.steps_whitened, args.out)

    rows = read_metrics(Path(prong_best["out_dir"]) / "metrics.csv")
    reached = [r.step for r in rows if r.train_loss <= target and not r.reparam_event]
    print(f"tuned momentum-SGD loss at step {args.steps_sgd}: {target:.5f}")
    if reached:
        print(f"whitened optimizer reaches it at step {reached[0]} "
              f"({args.steps_sgd / reached[0]:.1f}x fewer updates)")
    else:
        print(f"whitened optimizer did not reach it within {args.steps_whitened} steps "
              f"(best final loss {prong_best['final_train_loss']:.5f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
