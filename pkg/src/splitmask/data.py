"""Dataset ingestion: seeded Gaussian blobs, ``label,f0,f1,...`` CSV, and IDX files."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    X_val: np.ndarray = None
    y_val: np.ndarray = None
    centers: np.ndarray = None  # class means, known only for synthetic data

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise IngestionError(f"{len(self.X)} samples but {len(self.y)} labels")
        if self.X_val is None:
            self.X_val = self.X[:0]
            self.y_val = self.y[:0]

    def __len__(self):
        return len(self.X)

    def split(self, val_fraction, seed):
        """Hold out a seeded fraction of the samples as the validation set."""
        n_val = int(round(len(self.X) * val_fraction))
        order = np.random.default_rng(seed).permutation(len(self.X))
        val, train = order[:n_val], order[n_val:]
        return Dataset(self.X[train], self.y[train], self.n_classes, self.X[val], self.y[val], self.centers)

    def reshape(self, input_shape):
        input_shape = tuple(input_shape)
        if int(np.prod(input_shape)) != int(np.prod(self.X.shape[1:])):
            raise IngestionError(f"samples of shape {self.X.shape[1:]} cannot feed a model expecting {input_shape}")
        return Dataset(self.X.reshape((-1,) + input_shape), self.y, self.n_classes,
                       self.X_val.reshape((-1,) + input_shape), self.y_val, self.centers)


def synthetic_blobs(n=200, n_classes=2, dim=20, separation=4.0, class_std=1.0, seed=0):
    """Isotropic Gaussian classes whose means are exactly ``separation * class_std`` apart.

    Means sit on scaled orthonormal directions, so every pair of classes is
    equidistant. Labels cycle through the classes before shuffling.
    """
    if n_classes > dim:
        raise ValueError("synthetic blobs need dim >= n_classes")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    means = q.T * (separation * class_std / np.sqrt(2.0))
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    X = means[y] + class_std * rng.standard_normal((n, dim))
    return Dataset(X, y.astype(np.int64), n_classes, centers=means)


def _open(path, mode="r", **kw):
    try:
        return open(path, mode, **kw)
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc.strerror}") from None


def read_csv_dataset(path, n_classes=None):
    path = Path(path)
    with _open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file", 0) from None
        if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
            raise IngestionError(f"{path}: header must be 'label,f0,f1,...'", 0)
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise IngestionError(f"{path}: line {lineno}: {exc}") from None
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    y = np.array(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(X, y, n_classes)


def write_csv_dataset(path, X, y):
    X = np.asarray(X).reshape(len(X), -1)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(X.shape[1])])
        for label, row in zip(y, X):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def _read_idx(path, expected_magic, ndim):
    with _open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IngestionError(f"{path}: truncated header", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IngestionError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IngestionError(f"{path}: truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(dims))
    if len(data) - header_end != count:
        raise IngestionError(f"{path}: payload holds {len(data) - header_end} bytes, dims {dims} need {count}",
                             header_end + min(count, len(data) - header_end))
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(dims)


def read_idx_dataset(images_path, labels_path, n_classes=10):
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IngestionError(f"{len(images)} images but {len(labels)} labels", 4)
    X = images.astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), n_classes)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    with Path(path).open("wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_dataset(spec: dict) -> Dataset:
    """Build a dataset from a ``{"kind": ...}`` spec (synthetic-blobs, csv or idx)."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    val_fraction = spec.pop("val_fraction", 0.0)
    split_seed = spec.pop("split_seed", 0)
    if kind == "synthetic-blobs":
        ds = synthetic_blobs(**spec)
    elif kind == "csv":
        ds = read_csv_dataset(spec.pop("path"), **spec)
    elif kind == "idx":
        ds = read_idx_dataset(spec.pop("images"), spec.pop("labels"), **spec)
    else:
        raise IngestionError(f"unknown dataset kind {kind!r}; expected synthetic-blobs, csv or idx")
    if val_fraction:
        ds = ds.split(val_fraction, split_seed)
    return ds
