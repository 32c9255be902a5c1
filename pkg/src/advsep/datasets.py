"""Datasets: MNIST IDX files, synthetic Gaussian blobs, stratified subsets."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(Exception):
    """Malformed or inconsistent input data."""


class BadMagicError(DataError):
    pass


class TruncatedError(DataError):
    pass


class TrailingBytesError(DataError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, d), values in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DataError(f"inputs must be 2-d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"{y.shape[0]} labels for {x.shape[0]} inputs")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
            raise DataError("inputs must lie in [0, 1]")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def take(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read one unsigned-byte IDX file into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header
    if payload < size:
        raise TruncatedError(f"{path}: payload has {payload} bytes, header promises {size}")
    if payload > size:
        raise TrailingBytesError(f"{path}: {payload - size} bytes past the declared payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (gzip-compressed if ``path`` ends in .gz)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8 payloads")
    head = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    data = head + a.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # no mtime or file name in the header: the bytes depend on the data only
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def blob_means(k: int, dim: int) -> np.ndarray:
    """Cluster means used by :func:`synth_blobs`; fixed for a given ``(k, dim)``."""
    rng = np.random.default_rng([0xB10B, k, dim])
    return rng.uniform(0.2, 0.8, size=(k, dim))


def synth_blobs(k: int, per_class_n: int, dim: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters clamped to [0, 1], shuffled under ``seed``."""
    if k < 2 or dim < 2 or spread <= 0 or per_class_n < 1:
        raise ValueError("synth_blobs needs k >= 2, dim >= 2, spread > 0, per_class_n >= 1")
    means = blob_means(k, dim)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), per_class_n)
    x = means[labels] + spread * rng.standard_normal((len(labels), dim))
    perm = rng.permutation(len(labels))
    return Dataset(np.clip(x[perm], 0.0, 1.0), labels[perm], k)


def stratified_split(ds: Dataset, per_class_sizes, seed: int) -> list[Dataset]:
    """Disjoint class-balanced subsets: part ``j`` holds ``per_class_sizes[j]`` rows of every class."""
    need = int(sum(per_class_sizes))
    counts = ds.class_counts()
    if need > counts.min():
        raise DataError(f"need {need} examples per class, smallest class has {counts.min()}")
    rng = np.random.default_rng(seed)
    picks = [[] for _ in per_class_sizes]
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        start = 0
        for j, m in enumerate(per_class_sizes):
            picks[j].append(idx[start : start + m])
            start += m
    parts = []
    for j, chunks in enumerate(picks):
        idx = np.concatenate(chunks)
        parts.append(ds.take(idx[rng.permutation(len(idx))]))
    return parts


def subset(ds: Dataset, per_class_m: int, seed: int) -> Dataset:
    return stratified_split(ds, [per_class_m], seed)[0]


def to_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(ds.input_dim)])
        for y, row in zip(ds.labels, ds.inputs):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def from_csv(path, num_classes: int) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise DataError(f"{path}: missing 'label,x0,...' header")
    body = rows[1:]
    width = len(rows[0]) - 1
    try:
        if any(len(r) != width + 1 for r in body):
            raise ValueError("ragged rows")
        labels = np.array([int(r[0]) for r in body], dtype=np.int64)
        inputs = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), width)
    except ValueError as exc:
        raise DataError(f"{path}: malformed CSV ({exc})") from exc
    return Dataset(inputs, labels, num_classes)
