#!/usr/bin/env python3
"""Convert the digit JSON shipped in the npm `mnist` package into gzipped IDX files.

Usage: mnist_from_npm.py <package-dir> <out-dir> [n_train]

The package holds 10,000 MNIST digits (28x28, floats in [0,1]). They are
quantized back to bytes, interleaved by a fixed permutation and split into
train/test IDX files using the standard MNIST file names.
"""
import gzip
import json
import os
import random
import struct
import sys


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 8000
    samples = []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as fh:
            data = json.load(fh)["data"]
        for k in range(len(data) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784])
            samples.append((px, digit))
    random.Random(20151).shuffle(samples)
    os.makedirs(out, exist_ok=True)
    splits = {"train": samples[:n_train], "t10k": samples[n_train:]}
    for name, items in splits.items():
        with gzip.GzipFile(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
            fh.write(struct.pack(">IIII", 2051, len(items), 28, 28))
            for px, _ in items:
                fh.write(px)
        with gzip.GzipFile(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
            fh.write(struct.pack(">II", 2049, len(items)))
            fh.write(bytes(lbl for _, lbl in items))
    print(f"wrote {len(splits['train'])} train / {len(splits['t10k'])} test to {out}")


if __name__ == "__main__":
    main()
