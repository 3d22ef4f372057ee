"""Build the bundled MNIST subset (gzipped IDX) from the npm ``mnist`` package.

The npm package (https://www.npmjs.com/package/mnist, MIT) ships 10,000 MNIST
digits as JSON arrays of pixel intensities rounded to three decimals; rounding
``v * 255`` recovers the original u8 values exactly.

Usage::

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python tools/build_mnist_subset.py package/src/digits data/mnist_subset
"""
import gzip
import json
import sys
from pathlib import Path

import numpy as np

N_TEST = 2000
SPLIT_SEED = 20210101


def _write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        values = np.array(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        values = values.reshape(-1, 28, 28)
        images.append(np.rint(values * 255).astype(np.uint8))
        labels.append(np.full(len(values), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(SPLIT_SEED).permutation(len(labels))
    test, train = order[:N_TEST], order[N_TEST:]
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    _write_idx(dst / "train-images-idx3-ubyte.gz", images[train])
    _write_idx(dst / "train-labels-idx1-ubyte.gz", labels[train])
    _write_idx(dst / "t10k-images-idx3-ubyte.gz", images[test])
    _write_idx(dst / "t10k-labels-idx1-ubyte.gz", labels[test])
    print(f"train={len(train)} test={len(test)} -> {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
