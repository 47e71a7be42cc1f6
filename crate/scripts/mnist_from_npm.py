#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into IDX files.

The package bundles 10,000 MNIST digits as per-class JSON arrays of floats in
[0, 1]. This writes them as `images-idx3-ubyte` / `labels-idx1-ubyte` with a
fixed-seed interleaving so the files are not grouped by class.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    samples = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            samples.append((pixels, label))
    random.Random(20240101).shuffle(samples)

    dst.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    with open(dst / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with open(dst / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
