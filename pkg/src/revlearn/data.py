"""Datasets: IDX files, synthetic generators, replayable minibatch schedules."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "REVLEARN_DATA_DIR"

# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("="): code for code, dt in _IDX_TYPES.items()}


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class DimensionMismatchError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


def rng_for(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of nonnegative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-d, got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, split or self.split)


# --- IDX -------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into an array of its native type."""
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0 or blob[2] not in _IDX_TYPES:
        raise BadMagicError(f"{path}: not an IDX file (magic {blob[:4].hex() or 'missing'})")
    dtype = _IDX_TYPES[blob[2]]
    ndim = blob[3]
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedPayloadError(f"{path}: header ends after {len(blob)} bytes")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(blob) - header
    if payload < expected:
        raise TruncatedPayloadError(f"{path}: payload {payload} bytes, dims {dims} need {expected}")
    if payload > expected:
        raise DimensionMismatchError(f"{path}: {payload - expected} bytes beyond dims {dims}")
    arr = np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize, offset=header)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"dtype {array.dtype} has no IDX type code")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(_IDX_TYPES[code]).tobytes())


def load_idx_pair(images_path, labels_path, num_classes=10, split="train") -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DimensionMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    return Dataset(x, labels.astype(np.int64), num_classes, split)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(split="train", data_dir=None):
    """Paths to the MNIST IDX pair for ``split``, or None if absent."""
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        return None
    found = []
    for name in _MNIST_FILES[split]:
        for cand in (Path(data_dir) / name, Path(data_dir) / (name + ".gz")):
            if cand.exists():
                found.append(cand)
                break
        else:
            return None
    return tuple(found)


# --- synthetic -------------------------------------------------------------

def synthetic_classification(seed: int, n: int, d: int, k: int,
                             separation: float = 3.0, split="train") -> Dataset:
    """Gaussian clusters with unit noise around class means ``separation`` apart."""
    if not n >= k >= 2:
        raise ValueError(f"need n >= k >= 2, got n={n}, k={k}")
    rng = rng_for(seed, n, d, k)
    means = _class_means(seed, d, k) * separation
    labels = rng.permutation(np.arange(n) % k)
    x = means[labels] + rng.standard_normal((n, d))
    return Dataset(x, labels, k, split)


def _class_means(seed, d, k):
    rng = rng_for(seed, 7919, d, k)
    if d >= k:
        # orthonormal directions, pairwise distance sqrt(2)
        q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        return q.T
    m = rng.standard_normal((k, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def train_valid_split(seed, n_train, n_valid, d, k, separation=3.0):
    """Train and validation sets drawn from the same clusters."""
    full = synthetic_classification(seed, n_train + n_valid, d, k, separation)
    return (full.subset(slice(0, n_train), "train"),
            full.subset(slice(n_train, n_train + n_valid), "valid"))


def load_or_synthesize(n_train, n_valid, seed=0, data_dir=None, synth_dims=(784, 10)):
    """MNIST when available under ``REVLEARN_DATA_DIR``, else synthetic clusters."""
    paths = find_mnist("train", data_dir)
    if paths is not None:
        full = load_idx_pair(*paths)
        idx = rng_for(seed, 1).permutation(len(full))
        return (full.subset(idx[:n_train], "train"),
                full.subset(idx[n_train:n_train + n_valid], "valid"))
    d, k = synth_dims
    return train_valid_split(seed, n_train, n_valid, d, k)


@dataclass
class MultitaskData:
    tasks: list[tuple[Dataset, Dataset]] = field(default_factory=list)

    @property
    def num_tasks(self):
        return len(self.tasks)


def synthetic_multitask(seed, num_tasks, n_train, n_valid, d, k, separation=2.0,
                        shared=0.8) -> MultitaskData:
    """Related tasks: class means mix a shared direction set with a per-task one."""
    base = _class_means(seed, d, k)
    tasks = []
    for task in range(num_tasks):
        own = _class_means(seed + 1000 * (task + 1), d, k)
        means = separation * (shared * base + (1 - shared) * own)
        rng = rng_for(seed, task, n_train, n_valid)
        n = n_train + n_valid
        labels = rng.permutation(np.arange(n) % k)
        x = means[labels] + rng.standard_normal((n, d))
        tasks.append((Dataset(x[:n_train], labels[:n_train], k, "train"),
                      Dataset(x[n_train:], labels[n_train:], k, "valid")))
    return MultitaskData(tasks)


# --- batching --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BatchSchedule:
    batches: tuple

    def __len__(self):
        return len(self.batches)

    def __getitem__(self, t) -> np.ndarray:
        return self.batches[t]

    def __eq__(self, other):
        return (isinstance(other, BatchSchedule) and len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in zip(self.batches, other.batches)))


def batch_schedule(seed: int, n: int, batch_size: int, T: int) -> BatchSchedule:
    """Shuffle once per epoch and cut the permutation into consecutive batches."""
    if not 0 < batch_size <= n:
        raise ValueError(f"batch_size {batch_size} must be in [1, {n}]")
    per_epoch = -(-n // batch_size)
    batches = []
    epoch = 0
    while len(batches) < T:
        if batch_size == n:
            perm = np.arange(n)
        else:
            perm = rng_for(seed, 2, epoch).permutation(n)
        batches.extend(np.sort(b) for b in np.array_split(perm, per_epoch))
        epoch += 1
    return BatchSchedule(tuple(batches[:T]))
