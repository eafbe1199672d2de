#!/usr/bin/env python3
"""Convert the digit samples bundled with the `mnist` npm package into IDX files.

Usage: mnist_from_npm.py <npm-package-dir> <out-dir>

The npm package ships ~10k MNIST digits as JSON arrays of [0,1] floats.
Each class is split 80/20 into train/test (in package order), both splits
are shuffled with a fixed seed and written gzipped in the standard IDX
layout (magic 0x803 / 0x801, big-endian dims, u8 payload).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def write_idx(out: Path, stem: str, samples):
    with gzip.GzipFile(out / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), SIDE, SIDE))
        for pixels, _ in samples:
            f.write(bytes(pixels))
    with gzip.GzipFile(out / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        cut = n - n // 5
        for s in range(n):
            chunk = raw[s * SIDE * SIDE:(s + 1) * SIDE * SIDE]
            pixels = [min(255, max(0, round(v * 255))) for v in chunk]
            (train if s < cut else test).append((pixels, digit))
    rng = random.Random(20160101)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
