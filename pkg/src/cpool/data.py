"""Synthetic pixel-distance images and MNIST IDX ingestion."""

from __future__ import annotations

import functools
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

IMAGE_SIZE = 32
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "CPOOL_DATA_DIR"
LIMITED_SQ = 49.0


class DataError(Exception):
    """Malformed or missing input data."""


@dataclass(frozen=True)
class DistanceSample:
    image: np.ndarray  # (1, 32, 32)
    target: float
    coords: tuple[tuple[int, int], tuple[int, int]]


def _sample_pairs(rng: np.random.Generator, n: int, limit_sq: float | None, size: int):
    npix = size * size
    a_out = np.empty(0, dtype=np.int64)
    b_out = np.empty(0, dtype=np.int64)
    while a_out.size < n:
        want = (n - a_out.size) * (1 if limit_sq is None else 8) + 8
        a = rng.integers(0, npix, want)
        b = rng.integers(0, npix - 1, want)
        b = b + (b >= a)  # uniform over the other npix - 1 pixels
        if limit_sq is not None:
            dr = a // size - b // size
            dc = a % size - b % size
            keep = dr * dr + dc * dc < limit_sq
            a, b = a[keep], b[keep]
        a_out = np.concatenate([a_out, a])
        b_out = np.concatenate([b_out, b])
    return a_out[:n], b_out[:n]


def distance_batch(rng: np.random.Generator, n: int, limit_sq: float | None = None,
                   size: int = IMAGE_SIZE, dtype=np.float32):
    """``n`` two-pixel images (n, 1, size, size) and squared distances (n, 1, 1, 1)."""
    if limit_sq is not None and not limit_sq > 1:
        raise ValueError("limit_sq must exceed 1 so that some pair qualifies")
    a, b = _sample_pairs(rng, n, limit_sq, size)
    images = np.zeros((n, 1, size, size), dtype=dtype)
    rows = np.arange(n)
    images[rows, 0, a // size, a % size] = 1.0
    images[rows, 0, b // size, b % size] = 1.0
    dr = a // size - b // size
    dc = a % size - b % size
    targets = (dr * dr + dc * dc).astype(dtype).reshape(n, 1, 1, 1)
    return images, targets, np.stack([a // size, a % size, b // size, b % size], axis=1)


def make_distance_sample(p1: tuple[int, int], p2: tuple[int, int], size: int = IMAGE_SIZE) -> DistanceSample:
    if tuple(p1) == tuple(p2):
        raise ValueError("the two pixels must be distinct")
    img = np.zeros((1, size, size))
    img[0, p1[0], p1[1]] = 1.0
    img[0, p2[0], p2[1]] = 1.0
    target = float((p1[0] - p2[0]) ** 2 + (p1[1] - p2[1]) ** 2)
    return DistanceSample(img, target, (tuple(p1), tuple(p2)))


def gen_distance_sample(rng: np.random.Generator, limit_sq: float | None = None) -> DistanceSample:
    _, _, coords = distance_batch(rng, 1, limit_sq)
    r1, c1, r2, c2 = (int(v) for v in coords[0])
    return make_distance_sample((r1, c1), (r2, c2))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path, kind: str) -> np.ndarray:
    """Parse a big-endian IDX file.

    ``kind='images'`` returns float32 (n, 1, 32, 32) scaled to [0, 1] and
    zero-padded from 28x28; ``kind='labels'`` returns int64 (n,).
    """
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if kind == "labels":
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        body = raw[8:]
        if len(body) < count:
            raise DataError(f"{path}: truncated, {len(body)} of {count} labels")
        labels = np.frombuffer(body[:count], dtype=np.uint8).astype(np.int64)
        if labels.size and labels.max() > 9:
            raise DataError(f"{path}: label out of range")
        return labels
    if kind != "images":
        raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    rows, cols = struct.unpack(">II", raw[8:16])
    need = count * rows * cols
    body = raw[16:]
    if len(body) < need:
        raise DataError(f"{path}: truncated, {len(body)} of {need} pixel bytes")
    if rows > IMAGE_SIZE or cols > IMAGE_SIZE:
        raise DataError(f"{path}: images {rows}x{cols} exceed {IMAGE_SIZE}x{IMAGE_SIZE}")
    pix = np.frombuffer(body[:need], dtype=np.uint8).reshape(count, rows, cols)
    out = np.zeros((count, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    top, left = (IMAGE_SIZE - rows) // 2, (IMAGE_SIZE - cols) // 2
    out[:, 0, top : top + rows, left : left + cols] = pix / np.float32(255.0)
    return out


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_dir(explicit=None) -> Path:
    d = explicit or os.environ.get(DATA_DIR_ENV)
    if not d:
        raise DataError(f"MNIST location unknown; set {DATA_DIR_ENV} or pass a data directory")
    return Path(d)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise DataError(f"{stem} not found in {directory}")


def load_mnist(split: str, directory=None) -> tuple[np.ndarray, np.ndarray]:
    if split not in _MNIST_NAMES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    d = data_dir(directory)
    img_name, lab_name = _MNIST_NAMES[split]
    images = load_idx(_find(d, img_name), "images")
    labels = load_idx(_find(d, lab_name), "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def target_moments(limit_sq: float | None = None, size: int = IMAGE_SIZE) -> tuple[float, float]:
    """Exact mean and standard deviation of the squared-distance target.

    Sampling is uniform over ordered pairs of distinct pixels that satisfy
    the limit, so the moments follow from counting pairs per offset.
    """
    d = np.arange(-(size - 1), size)
    count = size - np.abs(d)  # positions admitting a given row (or column) offset
    sq = d[:, None] ** 2 + d[None, :] ** 2
    weight = (count[:, None] * count[None, :]).astype(np.float64)
    keep = sq > 0
    if limit_sq is not None:
        keep &= sq < limit_sq
    w, t = weight[keep], sq[keep].astype(np.float64)
    mean = float((w * t).sum() / w.sum())
    var = float((w * (t - mean) ** 2).sum() / w.sum())
    return mean, float(np.sqrt(var))


class DistanceTask:
    """Regress the squared distance between two lit pixels; samples drawn on the fly."""

    head = "regression_1"
    metric_name = "mse"

    def __init__(self, limit_sq: float | None = None, dtype=np.float32):
        self.limit_sq = limit_sq
        self.dtype = dtype
        self.name = "distance" if limit_sq is None else "distance_limited"

    def train_batches(self, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        while True:
            images, targets, _ = distance_batch(rng, batch_size, self.limit_sq, dtype=self.dtype)
            yield Tensor(images), targets

    def target_moments(self) -> tuple[float, float]:
        return target_moments(self.limit_sq)

    def eval_set(self, size: int, rng: np.random.Generator):
        images, targets, _ = distance_batch(rng, size, self.limit_sq, dtype=self.dtype)
        return images, targets


class MnistTask:
    head = "classification_10"
    metric_name = "accuracy"
    name = "mnist"

    def __init__(self, train: tuple[np.ndarray, np.ndarray], test: tuple[np.ndarray, np.ndarray],
                 train_subset: int | None = None, dtype=np.float32):
        images, labels = train
        if train_subset is not None:
            images, labels = images[:train_subset], labels[:train_subset]
        self.train_images = images.astype(dtype, copy=False)
        self.train_labels = labels
        self.test_images = test[0].astype(dtype, copy=False)
        self.test_labels = test[1]

    @classmethod
    def from_dir(cls, directory=None, train_subset: int | None = 10000, dtype=np.float32):
        return cls(load_mnist("train", directory), load_mnist("test", directory), train_subset, dtype)

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self.train_labels) // batch_size)

    def train_batches(self, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n = len(self.train_labels)
        while True:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                sel = order[start : start + batch_size]
                yield Tensor(self.train_images[sel]), self.train_labels[sel]

    def eval_set(self, size: int | None, rng: np.random.Generator | None = None):
        if size is None:
            return self.test_images, self.test_labels
        return self.test_images[:size], self.test_labels[:size]


def batch_iter(task, batch_size: int, rng: np.random.Generator):
    return task.train_batches(batch_size, rng)
