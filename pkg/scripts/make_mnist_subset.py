"""Rebuild tests/data/mnist5k-*.gz from the 5,000-image MNIST sample shipped in mlxtend.

The sample (BSD-3, mlxtend/data/data/mnist_5k.csv.gz) holds 500 images per
class in class order, one row of 784 pixels plus the label. It is shuffled with
a fixed seed and split stratified into 4,000 train / 1,000 test images, then
written as gzipped IDX files.

    python3 scripts/make_mnist_subset.py path/to/mlxtend-*.whl|mnist_5k.csv.gz [outdir]
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TEST_PER_CLASS = 100


def read_source(path):
    path = Path(path)
    if path.suffix == ".whl":
        with zipfile.ZipFile(path) as z:
            blob = z.read(MEMBER)
    else:
        blob = path.read_bytes()
    rows = np.loadtxt(gzip.decompress(blob).decode().splitlines(), delimiter=",", dtype=np.int64)
    return rows[:, :-1].astype(np.uint8).reshape(-1, 28, 28), rows[:, -1].astype(np.uint8)


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", s) for s in array.shape)
    # mtime=0 keeps the gzip bytes reproducible
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
        f.write(header + array.tobytes())


def main(argv):
    src = argv[1]
    out = Path(argv[2]) if len(argv) > 2 else Path(__file__).resolve().parent.parent / "tests" / "data"
    out.mkdir(parents=True, exist_ok=True)
    images, labels = read_source(src)
    rng = np.random.default_rng(20240501)
    test_idx, train_idx = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(labels == k))
        test_idx.extend(idx[:TEST_PER_CLASS])
        train_idx.extend(idx[TEST_PER_CLASS:])
    for name, idx in (("train", train_idx), ("test", test_idx)):
        idx = rng.permutation(np.array(idx))
        write_idx(out / f"mnist5k-{name}-images-idx3-ubyte.gz", images[idx], 0x00000803)
        write_idx(out / f"mnist5k-{name}-labels-idx1-ubyte.gz", labels[idx], 0x00000801)
        print(f"{name}: {len(idx)} images")


if __name__ == "__main__":
    main(sys.argv)
