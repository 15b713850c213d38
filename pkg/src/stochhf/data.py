"""Datasets: IDX/CSV loading, preprocessing, synthetic generators, batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_UBYTE = 0x08
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# refuse headers that would describe more than this many elements
_MAX_ELEMENTS = 1 << 34


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray            # (n, features), float64
    targets: np.ndarray           # one-hot labels or reconstruction targets
    split: str = "train"
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"inputs have {self.inputs.shape[0]} rows but targets have {self.targets.shape[0]}")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_features(self):
        return self.inputs.shape[1]

    def take(self, idx, split=None):
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.inputs[idx], self.targets[idx], split or self.split, labels)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def parse_idx(raw):
    """Parse IDX bytes holding unsigned bytes; returns a uint8 array."""
    if len(raw) < 4:
        raise IdxTruncatedError("file shorter than the 4-byte magic number")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        raise IdxMagicError(f"bad IDX magic number 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError("file ends inside the dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise IdxDimensionError(f"dimensions {dims} describe too many elements")
    if len(raw) - header < count:
        raise IdxTruncatedError(f"expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(path):
    """Read an IDX file (optionally gzipped).

    Image files (magic 0x00000803) come back as float64 scaled to [0, 1];
    label files (0x00000801) and other unsigned-byte IDX files as int64.
    """
    with _open(path) as f:
        raw = f.read()
    arr = parse_idx(raw)
    if int.from_bytes(raw[:4], "big") == IMAGES_MAGIC:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.int64)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if np.any(array < 0) or np.any(array > 255) or np.any(array != np.round(array)):
            raise ValueError("IDX ubyte payload must hold integers in [0, 255]")
        array = array.astype(np.uint8)
    head = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim)
    head += struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(head + np.ascontiguousarray(array).tobytes())


def one_hot(labels, k=None):
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if k is None else k
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def load_idx_dataset(images_path, labels_path=None, task="classify", split="train", limit=None, k=10):
    images = read_idx(images_path)
    X = images.reshape(images.shape[0], -1)
    if limit is not None:
        X = X[:limit]
    if task == "autoencode":
        return Dataset(X, X, split)
    if labels_path is None:
        raise ValueError("classification needs a labels file")
    labels = read_idx(labels_path)
    if labels.shape[0] != images.shape[0]:
        raise IdxDimensionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        labels = labels[:limit]
    return Dataset(X, one_hot(labels, k), split, labels)


def load_csv(path, task="classify", split="train", k=None):
    """Comma-separated reals, one example per line; for classification the
    final column is the integer label."""
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if task == "autoencode":
        return Dataset(arr, arr, split)
    labels = arr[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise ValueError(f"{path}: labels in the last column must be non-negative integers")
    labels = labels.astype(np.int64)
    return Dataset(arr[:, :-1].copy(), one_hot(labels, k), split, labels)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, X):
        out = np.zeros_like(X, dtype=np.float64)
        ok = self.std >= 1e-8
        out[:, ok] = (X[:, ok] - self.mean[ok]) / self.std[ok]
        return out


def standardize(train, test=None, per_feature=True):
    """Zero mean / unit variance using training statistics only.

    Per-feature by default; ``per_feature=False`` uses one mean and std over
    all entries (suited to pixel data, where features share units).
    Features whose training std is below 1e-8 map to 0.
    """
    train = np.asarray(train, dtype=np.float64)
    if per_feature:
        st = Standardizer(train.mean(axis=0), train.std(axis=0))
    else:
        d = train.shape[1]
        st = Standardizer(np.full(d, train.mean()), np.full(d, train.std()))
    return st(train), (None if test is None else st(np.asarray(test, dtype=np.float64))), st


def log_count_transform(counts):
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    return np.log1p(counts)


def synth_curves(rng, n, side=28, pen_width=1.0, n_points=64):
    """Random quadratic Bezier strokes rendered with a Gaussian pen.

    A desk-scale stand-in for a curves image dataset: three control points
    uniform in the image square, intensity ``exp(-d^2 / (2 w^2))`` from the
    nearest curve sample, clipped to [0, 1]. Targets equal the inputs.
    """
    ctrl = rng.uniform(0.0, side - 1.0, size=(n, 3, 2))
    t = np.linspace(0.0, 1.0, n_points)[None, :, None]
    pts = ((1 - t) ** 2) * ctrl[:, 0:1] + 2 * (1 - t) * t * ctrl[:, 1:2] + (t ** 2) * ctrl[:, 2:3]
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    grid = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    X = np.empty((n, side * side))
    chunk = 256
    for s in range(0, n, chunk):
        P = pts[s:s + chunk]
        d2 = ((P[:, :, None, :] - grid[None, None, :, :]) ** 2).sum(-1).min(axis=1)
        X[s:s + chunk] = np.exp(-d2 / (2.0 * pen_width ** 2))
    X = np.clip(X, 0.0, 1.0)
    return Dataset(X, X, "train")


def synth_blobs(rng, n, n_features=20, k=4, spread=1.0, centers=None):
    """Gaussian clusters with one-hot labels; ``centers`` shares the class
    means between a train and a test draw."""
    if centers is None:
        centers = rng.normal(scale=3.0, size=(k, n_features))
    labels = rng.integers(0, k, size=n)
    X = centers[labels] + spread * rng.standard_normal((n, n_features))
    return Dataset(X, one_hot(labels, k), "train", labels), centers


def batch_iter(dataset, batch_size, rng=None, shuffle_per_epoch=True):
    """Yield ``(X, T)`` batches of exactly ``batch_size`` rows; the final
    partial batch is dropped."""
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} must be in [1, {n}]")
    order = rng.permutation(n) if (shuffle_per_epoch and rng is not None) else np.arange(n)
    for s in range(0, n - batch_size + 1, batch_size):
        idx = order[s:s + batch_size]
        yield dataset.inputs[idx], dataset.targets[idx]


def curvature_slice(grad_batch_size, curv_batch_size, epoch):
    """Slice of the gradient batch used for curvature products at ``epoch``
    (1-based); the h = G / C contiguous blocks cycle every h epochs."""
    if curv_batch_size < 1 or grad_batch_size % curv_batch_size:
        raise ValueError(
            f"gradient batch {grad_batch_size} is not a multiple of curvature batch {curv_batch_size}")
    h = grad_batch_size // curv_batch_size
    block = (epoch - 1) % h
    return slice(block * curv_batch_size, (block + 1) * curv_batch_size)
