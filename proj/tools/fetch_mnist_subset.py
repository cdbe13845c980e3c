#!/usr/bin/env python3
"""Builds a 10 000-image MNIST subset in IDX format from the `mnist` npm package.

The package (MIT, github.com/cazala/mnist) ships about 1000 digits per class as
JSON intensities in [0, 1] rounded to three decimals; they are mapped back to
bytes with round(255 * v). Images are shuffled with a fixed seed so any tail
split holds every class.

Usage: tools/fetch_mnist_subset.py [--package DIR] [--out data]
"""
import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

import numpy as np


def fetch_package(workdir):
    subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = next(pathlib.Path(workdir).glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tf:
        tf.extractall(workdir)
    return pathlib.Path(workdir) / "package"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package", help="already unpacked npm package directory")
    ap.add_argument("--out", default="data")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = pathlib.Path(args.package) if args.package else fetch_package(tmp)
        images, labels = [], []
        for digit in range(10):
            flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
            arr = np.asarray(flat, dtype=np.float64).reshape(-1, 784)
            images.append(arr)
            labels.append(np.full(len(arr), digit, dtype=np.uint8))

    x = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.RandomState(20131220).permutation(len(x))
    x, y = x[order], y[order]
    n = min(10000, len(x))
    x, y = x[:n], y[:n]
    pixels = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mnist10k-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(pixels.tobytes())
    with open(out / "mnist10k-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(y.tobytes())
    print(f"wrote {n} images to {out}/")


if __name__ == "__main__":
    main()
