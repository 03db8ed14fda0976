#!/usr/bin/env python3
"""Slice-combination sweep: train the plain UNet with 3-3/3-5/5-3/5-5 windows
on a phantom cohort and tabulate accuracy per combination.

Usage:
    python scripts/run_slice_sweep.py --out-dir runs/sweep [--epochs 8] [--seed 7]
"""

import argparse
import json
import sys
from pathlib import Path

from reconscan import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="runs/sweep")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--extent", type=int, default=64)
    args = parser.parse_args()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo = round(args.extent * 28 / 64)
    hi = round(args.extent * 44 / 64)
    config = {
        "seed": args.seed,
        "planes": ["axial"],
        "paths": {
            "data_dir": "phantoms",
            "manifest": "phantoms/manifest.csv",
            "report_dir": "report",
        },
        "slice_range": [lo, hi],
        "split": {"test_subjects": ["test-h00", "test-h01", "test-h02"]},
        "model": {"kind": "unet33", "base_width": 8},
        "train": {"batch_size": 8, "patience": 10, "max_epochs": args.epochs},
        "metric": "l2",
        "threshold": {"kind": "avg"},
        "sweep": {"combos": [[3, 3], [3, 5], [5, 3], [5, 5]],
                  "max_epochs": args.epochs},
        "phantom": {
            "extent": args.extent,
            "n_train_healthy": 6,
            "n_test_healthy": 3,
            "n_test_anomalous": 10,
            "scans_per_subject": 2,
            "noise_sigma": 0.02,
            "anomaly_kind": "cavity_enlarge",
            "magnitude_range": [0.6, 1.0],
        },
    }
    config_path = out_dir / "sweep.json"
    config_path.write_text(json.dumps(config, indent=2))
    for command in ("phantom", "sweep"):
        code = cli.main([command, "--config", str(config_path)])
        if code != 0:
            return code
    print(f"table written to {out_dir / 'report' / 'sweep.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
