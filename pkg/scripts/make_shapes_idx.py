#!/usr/bin/env python3
"""Generate a synthetic-shapes IDX file for exercising the image CLI paths."""

import argparse

import numpy as np

from ufs_lab.datasets import synthetic_shapes, write_idx_images
from ufs_lab.numerics import SeededRng


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="output .idx path")
    parser.add_argument("--count", type=int, default=512)
    parser.add_argument("--size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images = synthetic_shapes(args.count, args.size, SeededRng(args.seed))
    u8 = np.clip((images[:, 0] + 1.0) * 127.5, 0, 255).astype(np.uint8)
    write_idx_images(u8, args.out)
    print(f"wrote {args.count} {args.size}x{args.size} shapes to {args.out}")


if __name__ == "__main__":
    main()
