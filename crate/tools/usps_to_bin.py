#!/usr/bin/env python3
"""Convert USPS digits into the plain binary files read by the `usps` dataset.

Output per split: u32 LE count N, N*256 f32 LE pixels in [0, 1] (row-major
16x16), then N u8 labels.

Accepted inputs:
  * usps.h5 with groups `train` and `test`, each holding `data` (N x 256,
    values in [0, 1]) and `target`
  * the LIBSVM text files `usps` and `usps.t` (optionally .bz2), whose
    labels 1..10 stand for digits 0..9 and whose features lie in [-1, 1]

    python3 tools/usps_to_bin.py usps.h5 data/usps
    python3 tools/usps_to_bin.py --libsvm usps.bz2 usps.t.bz2 data/usps
"""
import argparse
import bz2
import os
import struct

import numpy as np


def write_split(path, pixels, labels):
    pixels = np.clip(np.asarray(pixels, dtype=np.float32), 0.0, 1.0)
    labels = np.asarray(labels, dtype=np.uint8)
    assert pixels.shape == (len(labels), 256), pixels.shape
    assert labels.max() <= 9
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(labels)))
        f.write(pixels.astype("<f4").tobytes())
        f.write(labels.tobytes())
    print(os.path.basename(path), len(labels))


def read_h5(path):
    import h5py

    with h5py.File(path, "r") as f:
        return {split: (f[split]["data"][:], f[split]["target"][:]) for split in ("train", "test")}


def read_libsvm(path):
    opener = bz2.open if path.endswith(".bz2") else open
    pixels, labels = [], []
    with opener(path, "rt") as f:
        for line in f:
            fields = line.split()
            if not fields:
                continue
            row = np.full(256, -1.0)
            for item in fields[1:]:
                k, v = item.split(":")
                row[int(k) - 1] = float(v)
            pixels.append((row + 1.0) / 2.0)
            labels.append(int(float(fields[0])) - 1)
    return np.asarray(pixels), np.asarray(labels)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("inputs", nargs="+", help="usps.h5, or the train and test LIBSVM files with --libsvm")
    ap.add_argument("out_dir")
    ap.add_argument("--libsvm", action="store_true")
    args = ap.parse_args()

    if args.libsvm:
        if len(args.inputs) != 2:
            ap.error("--libsvm needs the train and the test file")
        splits = {"train": read_libsvm(args.inputs[0]), "test": read_libsvm(args.inputs[1])}
    else:
        if len(args.inputs) != 1:
            ap.error("expected a single usps.h5")
        splits = read_h5(args.inputs[0])

    os.makedirs(args.out_dir, exist_ok=True)
    for split, (pixels, labels) in splits.items():
        write_split(os.path.join(args.out_dir, f"usps-{split}.bin"), pixels, labels)


if __name__ == "__main__":
    main()
