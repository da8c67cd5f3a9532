#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into gzipped IDX files.

Usage: npm pack mnist && tar xzf mnist-*.tgz && python3 mnist_from_npm.py package/src/digits data/mnist

The package ships 10,000 MNIST digits as JSON arrays of 784 floats in [0, 1]
(three decimals). Pixels are mapped back to bytes with round(v * 255). The pool
is split per class, in file order, into 80% train / 20% test.
"""
import gzip
import json
import os
import struct
import sys


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        count = len(flat) // 784
        cut = (count * 8) // 10
        for i in range(count):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            split = "train" if i < cut else "t10k"
            splits[split][0].append(px)
            splits[split][1].append(digit)
    os.makedirs(dst, exist_ok=True)
    for name, (images, labels) in splits.items():
        # interleave classes so file order is not sorted by label
        order = sorted(range(len(labels)), key=lambda k: ((k * 2654435761) % 4294967296))
        images = [images[k] for k in order]
        labels = [labels[k] for k in order]
        write_idx(os.path.join(dst, f"{name}-images-idx3-ubyte.gz"), 0x803, [len(images), 28, 28], b"".join(images))
        write_idx(os.path.join(dst, f"{name}-labels-idx1-ubyte.gz"), 0x801, [len(labels)], bytes(labels))
        print(name, len(labels))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
