"""Rebuild data/mnist/ from the `mnist` npm package (10,000 MNIST digits, MIT licence).

    npm pack mnist && tar xzf mnist-*.tgz
    python tools/mnist_from_npm.py package/src/digits data/mnist

The package stores pixels as byte/255 rounded to 3 decimals, which is fine
enough to recover the original bytes exactly with round(v * 255).
"""

import json
import sys
from pathlib import Path

import numpy as np

from advsep.datasets import write_idx


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        flat = np.array(json.loads((src / f"{digit}.json").read_text())["data"], dtype=np.float64)
        imgs = flat.reshape(-1, 28, 28)
        images.append(np.rint(imgs * 255.0).astype(np.uint8))
        labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = np.random.default_rng(0).permutation(len(labels))
    dst.mkdir(parents=True, exist_ok=True)
    write_idx(dst / "digits-images-idx3-ubyte.gz", images[perm])
    write_idx(dst / "digits-labels-idx1-ubyte.gz", labels[perm])
    print(f"wrote {len(labels)} digits to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
