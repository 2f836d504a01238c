#!/usr/bin/env python3
"""Run the four ring8 presets (baseline, +UFS, +Top-k, +Top-k+UFS) in sequence."""

import argparse
import json
from pathlib import Path

from ufs_lab.harness import apply_overrides, config_from_dict, run_experiment

PRESETS = ("ring8_baseline", "ring8_ufs", "ring8_topk", "ring8_topk_ufs")
CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iterations", type=int, default=None,
                        help="override the preset iteration budget")
    parser.add_argument("--out-root", default="runs", help="output directory root")
    args = parser.parse_args()

    for name in PRESETS:
        obj = json.loads((CONFIG_DIR / f"{name}.json").read_text())
        overrides = [f"out_dir={args.out_root}/{name}"]
        if args.iterations is not None:
            overrides.append(f"train.iterations={args.iterations}")
        apply_overrides(obj, overrides)
        result = run_experiment(config_from_dict(obj))
        final = result.records[-1]
        print(f"{name}: status={result.status} final_frechet={final.frechet:.4f} "
              f"covered_modes={final.covered_modes}")


if __name__ == "__main__":
    main()
