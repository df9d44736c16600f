#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

Usage: mnist_from_npm.py <package/src/digits dir> <output dir>

Each JSON file holds a flat list of pixel intensities p/255 rounded to three
decimals; 784 values per image. Rounding back with round(v * 255) recovers
the original byte exactly. Images are written digit by digit.
"""
import json
import os
import struct
import sys


def main():
    src, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    images = bytearray()
    labels = bytearray()
    count = 0
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = json.load(fh)["data"]
        assert len(flat) % 784 == 0
        n = len(flat) // 784
        images.extend(min(255, max(0, round(v * 255))) for v in flat)
        labels.extend([digit] * n)
        count += n
    with open(os.path.join(out, "images-idx3-ubyte"), "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, count, 28, 28))
        fh.write(images)
    with open(os.path.join(out, "labels-idx1-ubyte"), "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, count))
        fh.write(labels)
    print(f"wrote {count} images to {out}")


if __name__ == "__main__":
    main()
