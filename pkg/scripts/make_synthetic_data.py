#!/usr/bin/env python3
"""
Write a small synthetic dataset and a matching run config.

The in-distribution images are dim blobs and the OoD images are bright ones,
so a Gaussian fit on them should reach an AUC close to 1.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

try:
    from density_ood import dataman
except ImportError:
    print("Error: Could not import the density_ood package.")
    print("Please make sure the package is installed by running:")
    print("  pip install -e .")
    sys.exit(1)


def images(rng, n, side, low, high):
    return rng.integers(low, high + 1, size=(n, side, side), dtype=np.uint8)


def main():
    """Write synthetic IDX files and a run config."""
    parser = argparse.ArgumentParser(description="Write a synthetic dataset")
    parser.add_argument("--output", default="data/synthetic",
                        help="Directory to write into (default: data/synthetic)")
    parser.add_argument("--side", type=int, default=8,
                        help="Image side length in pixels (default: 8)")
    parser.add_argument("--train", type=int, default=2000, help="Training images")
    parser.add_argument("--test", type=int, default=500, help="Test and OoD images")
    parser.add_argument("--seed", type=int, default=0, help="Random seed")
    args = parser.parse_args()

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    dataman.write_idx(out / "train-images", images(rng, args.train, args.side, 0, 100))
    dataman.write_idx(out / "test-images", images(rng, args.test, args.side, 0, 100))
    dataman.write_idx(out / "ood-images", images(rng, args.test, args.side, 120, 255))
    dataman.write_idx(out / "ood-labels", (np.arange(args.test) % 10).astype(np.uint8))

    config = {
        "name": "synthetic-gaussian",
        "train": {"paths": [str(out / "train-images")], "name": "synthetic-train"},
        "test": {"paths": [str(out / "test-images")], "name": "synthetic-test"},
        "ood": {"paths": [str(out / "ood-images")],
                "labels_paths": [str(out / "ood-labels")], "name": "synthetic-ood"},
        "n_samples": 1000,
    }
    (out / "run.json").write_text(json.dumps(config, indent=2))

    print(f"Wrote {args.train} training and {args.test} test/OoD images to {out}")
    print(f"\nYou can fit a model by running:")
    print(f"  density-ood fit --config {out / 'run.json'}")

    return 0


if __name__ == "__main__":
    sys.exit(main())
