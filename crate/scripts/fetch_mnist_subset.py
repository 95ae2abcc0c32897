#!/usr/bin/env python3
"""Build a 10,000-digit MNIST subset as IDX files.

The digits come from the `mnist` npm package (10,000 samples taken from the
official MNIST distribution, stored as JSON floats with three decimals).
They are converted back to bytes, shuffled with a fixed seed so classes are
interleaved, and written in the standard big-endian IDX layout:

    data/mnist10k/images-idx3-ubyte   magic 0x00000803, n, 28, 28, pixels
    data/mnist10k/labels-idx1-ubyte   magic 0x00000801, n, labels

Usage: python3 scripts/fetch_mnist_subset.py [OUT_DIR]
"""

import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"
SHUFFLE_SEED = 20210612


def main() -> int:
    root = Path(__file__).resolve().parent.parent
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "data" / "mnist10k"
    out_dir.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True, capture_output=True)
        tarball = next(Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tarball) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            raw = json.loads((Path(tmp) / "package" / "src" / "digits" / f"{digit}.json").read_text())["data"]
            assert len(raw) % 784 == 0
            for i in range(0, len(raw), 784):
                pixels = bytes(min(255, max(0, round(v * 255))) for v in raw[i : i + 784])
                samples.append((pixels, digit))

    random.Random(SHUFFLE_SEED).shuffle(samples)
    n = len(samples)
    with open(out_dir / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with open(out_dir / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
