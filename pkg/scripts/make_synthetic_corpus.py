"""Write a small stand-in corpus in the class-per-directory layout.

Each "scan" is a grey ellipse whose dark interior region grows with the class
index, plus noise, so the classes are learnable but not trivially separable.

    python scripts/make_synthetic_corpus.py out_dir --per-class 40,40,40,40 --size 64
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from demenscan.data import CLASS_NAMES


def scan(rng, label, size):
    yy, xx = np.mgrid[:size, :size] / (size - 1) * 2 - 1
    brain = (xx / 0.8) ** 2 + (yy / 0.9) ** 2 < 1
    radius = 0.12 + 0.1 * label + rng.normal(0, 0.03)
    hole = (xx ** 2 + yy ** 2) < radius ** 2
    img = np.where(brain, 150, 10) + rng.normal(0, 18, (size, size))
    img[hole & brain] = 40 + rng.normal(0, 10)
    return np.clip(img, 0, 255).astype(np.uint8)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--per-class", default="40,40,40,40")
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    counts = [int(v) for v in args.per_class.split(",")]
    rng = np.random.default_rng(args.seed)
    for label, (name, n) in enumerate(zip(CLASS_NAMES, counts)):
        d = Path(args.out_dir) / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            Image.fromarray(scan(rng, label, args.size)).save(d / f"{name.lower()}_{i:04d}.png")
    print(f"wrote {sum(counts)} images to {args.out_dir}")


if __name__ == "__main__":
    main()
