#!/usr/bin/env python3
"""Generate the procedural toy image set used for desk-scale experiments.

Images are deterministic given (count, size, seed): gradients, smoothed
noise textures, random shapes, checkerboards and plaids.
"""

import argparse

from latentcomm.data import synthesize_images


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", help="directory to fill with PNGs")
    parser.add_argument("--count", type=int, default=1100)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=55)
    args = parser.parse_args()
    paths = synthesize_images(args.out_dir, args.count, size=args.size,
                              seed=args.seed)
    print(f"wrote {len(paths)} images to {args.out_dir}")


if __name__ == "__main__":
    main()
