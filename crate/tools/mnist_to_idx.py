#!/usr/bin/env python3
"""Convert an MNIST digit dump into gzipped IDX train/test files.

Accepted inputs:
  * a flat CSV (784 pixel columns + trailing label), optionally gzipped
  * a directory of per-digit JSON files `0.json` .. `9.json`, each holding
    {"data": [...]} with 784 floats in [0, 1] per image, as shipped by the
    `mnist` npm package

The split is stratified and seeded, so rerunning produces identical files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 tools/mnist_to_idx.py package/src/digits data/mnist-10k --test-per-class 200
"""
import argparse
import gzip
import json
import os
import struct

import numpy as np


def write_idx(path, array, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for dim in array.shape:
            f.write(struct.pack(">I", dim))
        f.write(array.astype(np.uint8).tobytes())


def read_csv(path):
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    return table[:, :-1], table[:, -1]


def read_json_dir(path):
    pixels, labels = [], []
    for digit in range(10):
        with open(os.path.join(path, f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        n = len(flat) // 784
        pixels.append(np.rint(flat[: n * 784].reshape(n, 784) * 255))
        labels.extend([digit] * n)
    return np.concatenate(pixels).astype(np.int64), np.asarray(labels)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source", help="CSV file or directory of per-digit JSON files")
    ap.add_argument("out_dir")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    pixels, labels = read_json_dir(args.source) if os.path.isdir(args.source) else read_csv(args.source)
    assert pixels.shape[1] == 784, pixels.shape
    assert pixels.min() >= 0 and pixels.max() <= 255

    rng = np.random.default_rng(args.seed)
    test_idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(members, size=args.test_per_class, replace=False))
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    train_order = rng.permutation(np.flatnonzero(~test_mask))
    test_order = rng.permutation(np.flatnonzero(test_mask))

    os.makedirs(args.out_dir, exist_ok=True)
    for split, order in (("train", train_order), ("t10k", test_order)):
        images = pixels[order].reshape(-1, 28, 28)
        write_idx(os.path.join(args.out_dir, f"{split}-images-idx3-ubyte.gz"), images, 0x803)
        write_idx(os.path.join(args.out_dir, f"{split}-labels-idx1-ubyte.gz"), labels[order], 0x801)
        print(split, images.shape[0])


if __name__ == "__main__":
    main()
