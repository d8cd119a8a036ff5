"""Build a small MNIST directory in IDX format from mlxtend's 5,000-digit sample.

mlxtend ships ``mnist_5k.csv.gz`` (784 pixel columns then the label, 500
digits per class).  We split it per class into train and test files so the
regular IDX loader and the desk profile can run without network access:

    python3 scripts/make_mnist_subset.py --source /path/to/mlxtend-*.whl --out data/mnist

``--source`` may be the wheel, the extracted ``.csv.gz``, or omitted when
mlxtend is importable.
"""
from __future__ import annotations

import argparse
import gzip
import os
import zipfile

import numpy as np

from skiprnn.tasks import MNIST_FILES, write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_gz(source: str | None) -> bytes:
    if source is None:
        import mlxtend.data  # optional, only for this script

        source = os.path.join(os.path.dirname(mlxtend.data.__file__), "data", "mnist_5k.csv.gz")
    if source.endswith(".whl"):
        with zipfile.ZipFile(source) as z:
            return gzip.decompress(z.read(CSV_MEMBER))
    with open(source, "rb") as f:
        return gzip.decompress(f.read())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    table = np.loadtxt(read_csv_gz(args.source).decode("ascii").splitlines(), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test_idx.append(idx[: args.test_per_class])
        train_idx.append(idx[args.test_per_class :])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    os.makedirs(args.out, exist_ok=True)
    out = {
        "train_images": images[train_idx],
        "train_labels": labels[train_idx],
        "test_images": images[test_idx],
        "test_labels": labels[test_idx],
    }
    for key, arr in out.items():
        write_idx(os.path.join(args.out, MNIST_FILES[key]), arr)
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {args.out}")


if __name__ == "__main__":
    main()
