#!/usr/bin/env python3
"""Build MNIST IDX files from the 10,000-digit subset shipped in the `mnist` npm package.

The full 60k/10k distribution is not always reachable from sandboxed build
machines; the npm registry usually is. Each class is split 80/20 in file order
into train and test, then written in the standard IDX layout (magic 2051 for
images, 2049 for labels, big-endian headers, unsigned bytes).

Usage:
    tools/fetch_mnist.py [--out data/mnist] [--package-dir DIR]
"""

import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

ROWS = COLS = 28


def locate_digits(package_dir, workdir):
    if package_dir:
        return pathlib.Path(package_dir) / "src" / "digits"
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    with tarfile.open(pathlib.Path(workdir) / "mnist-1.1.0.tgz") as tar:
        tar.extractall(workdir)
    return pathlib.Path(workdir) / "package" / "src" / "digits"


def write_idx(out, name, images, labels):
    with open(out / f"{name}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), ROWS, COLS))
        for img in images:
            f.write(bytes(img))
    with open(out / f"{name}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--package-dir", default=None)
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    with tempfile.TemporaryDirectory() as tmp:
        digits = locate_digits(args.package_dir, tmp)
        for label in range(10):
            flat = json.loads((digits / f"{label}.json").read_text())["data"]
            n = len(flat) // (ROWS * COLS)
            samples = [[min(255, max(0, round(v * 255))) for v in
                        flat[i * ROWS * COLS:(i + 1) * ROWS * COLS]] for i in range(n)]
            cut = (n * 4) // 5
            train_x += samples[:cut]
            train_y += [label] * cut
            test_x += samples[cut:]
            test_y += [label] * (n - cut)

    write_idx(out, "train", train_x, train_y)
    write_idx(out, "t10k", test_x, test_y)
    print(f"wrote {len(train_y)} train / {len(test_y)} test samples to {out}")


if __name__ == "__main__":
    main()
