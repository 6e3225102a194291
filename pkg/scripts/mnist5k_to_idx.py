"""Write the 5000-digit MNIST sample bundled with mlxtend as IDX files.

usage: python scripts/mnist5k_to_idx.py OUT_DIR
"""

import sys
from pathlib import Path

import numpy as np

from offmanifold.mnist import write_idx


def convert(out) -> tuple[Path, Path]:
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = out / "mnist5k-images-idx3-ubyte", out / "mnist5k-labels-idx1-ubyte"
    write_idx(images, np.asarray(x, dtype=np.uint8).reshape(-1, 28, 28))
    write_idx(labels, np.asarray(y, dtype=np.uint8))
    return images, labels


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    for p in convert(sys.argv[1]):
        print(p)
