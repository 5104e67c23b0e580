#!/usr/bin/env python3
"""Convert the 5000-image MNIST CSV subset shipped with mlxtend into IDX files.

Usage: mnist5k_to_idx.py MNIST_5K_CSV_GZ OUT_DIR

Each CSV row holds 784 pixel values (0-255) followed by the class label.
The CSV is sorted by label, so every fifth row goes to the test split
(t10k-images-idx3-ubyte, 1000 images) and the rest to the train split
(train-images-idx3-ubyte, 4000 images). Each split is then shuffled with a
fixed seed so that any prefix mixes all classes. Labels are written as idx1
files.
"""

import gzip
import os
import random
import struct
import sys


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    src, out = sys.argv[1], sys.argv[2]
    rows = []
    with gzip.open(src, "rt") as f:
        for line in f:
            vals = [int(float(v)) for v in line.strip().split(",")]
            rows.append((vals[:784], vals[784]))
    os.makedirs(out, exist_ok=True)
    train = [r for i, r in enumerate(rows) if i % 5 != 4]
    test = [r for i, r in enumerate(rows) if i % 5 == 4]
    random.Random(0).shuffle(train)
    random.Random(1).shuffle(test)
    write_images(os.path.join(out, "train-images-idx3-ubyte"), train)
    write_labels(os.path.join(out, "train-labels-idx1-ubyte"), train)
    write_images(os.path.join(out, "t10k-images-idx3-ubyte"), test)
    write_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), test)


if __name__ == "__main__":
    main()
