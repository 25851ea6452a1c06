"""Dataset containers, loaders (IDX, CIFAR-10 binary, CSV) and GCN / ZCA preprocessing."""
import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
GCN_EPS = 1e-8
ZCA_EPS = 1e-2


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise CountMismatchError(f"{len(self.x)} examples but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, size):
        if size is None:
            return self
        if size > len(self):
            raise ValueError(f"subset_size {size} exceeds dataset size {len(self)}")
        return replace(self, x=self.x[:size], y=self.y[:size])

    def reshaped(self, shape):
        return replace(self, x=self.x.reshape((len(self),) + tuple(shape)))


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, magic):
    """Raw uint8 array from an IDX file with the given magic number."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file shorter than the IDX magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    need = int(np.prod(dims))
    payload = raw[head:]
    if len(payload) < need:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, num_classes=10):
    """IDX image/label pair -> Dataset with pixels scaled to [0, 1], shape (n, rows, cols)."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), num_classes)


def write_idx(path, array, magic):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    blob = struct.pack(">I", magic) + b"".join(struct.pack(">I", s) for s in array.shape) + array.tobytes()
    if str(path).endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    Path(path).write_bytes(blob)


def load_cifar10_binary(path, num_classes=10):
    """CIFAR-10 binary batch: records of 1 label byte + 3x32x32 channel-major pixels."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, rec[:, 0].astype(np.int64), num_classes)


def load_csv(path, num_classes=10, label_column=0, scale=255.0):
    """Rows of numbers with one label column; the remaining values are divided by ``scale``."""
    rows = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    if rows.size == 0:
        return Dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), num_classes)
    labels = rows[:, label_column]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise DataFormatError(f"{path}: label column holds non-integer values")
    x = np.delete(rows, label_column, axis=1) / scale
    return Dataset(x, labels.astype(np.int64), num_classes)


def gcn(x, eps=GCN_EPS):
    """Global contrast normalisation: per-example zero mean, divided by max(sd, eps)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    centred = flat - flat.mean(axis=1, keepdims=True)
    sd = centred.std(axis=1, keepdims=True)
    return (centred / np.maximum(sd, eps)).reshape(x.shape)


@dataclass(frozen=True)
class ZcaFit:
    mean: np.ndarray
    matrix: np.ndarray

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(len(x), -1)
        return ((flat - self.mean) @ self.matrix).reshape(x.shape)


def fit_zca(x, eps=ZCA_EPS):
    """Fit E (D + eps I)^(-1/2) E^T on the covariance of ``x``."""
    flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if len(flat) == 0:
        raise ValueError("cannot fit ZCA on an empty dataset")
    mean = flat.mean(axis=0)
    c = flat - mean
    cov = c.T @ c / len(flat)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, 0.0)
    matrix = (evecs / np.sqrt(evals + eps)) @ evecs.T
    return ZcaFit(mean, matrix)


def preprocess(train, test=None, gcn_on=True, zca_on=True, zca_eps=ZCA_EPS, gcn_eps=GCN_EPS):
    """Apply GCN then ZCA; the ZCA fit sees only ``train``. Returns ``(train, test)``."""
    tx = train.x
    sx = None if test is None else test.x
    if gcn_on:
        tx = gcn(tx, gcn_eps)
        sx = None if sx is None else gcn(sx, gcn_eps)
    if zca_on:
        fit = fit_zca(tx, zca_eps)
        tx = fit.apply(tx)
        sx = None if sx is None else fit.apply(sx)
    train = replace(train, x=tx)
    test = None if test is None else replace(test, x=sx)
    return train, test
