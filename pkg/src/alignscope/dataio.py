"""Datasets: Gaussian blobs, CIFAR-10 binary batches, label shuffling and gradient dumps."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidParameterError
from .numkit import Rng

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_CLASSES = 10


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    k: int
    split: str = "train"

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InvalidParameterError(f"inputs {x.shape} and labels {y.shape} do not match")
        if not np.isfinite(x).all():
            raise InvalidParameterError("inputs contain non-finite values")
        if y.size and (y.min() < 0 or y.max() >= self.k):
            raise InvalidParameterError(f"labels must lie in [0, {self.k})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], self.k, self.split)


def blob_centers(k: int, dim: int, center_scale: float, rng: Rng) -> np.ndarray:
    return rng.normal(0.0, center_scale, size=(k, dim))


def synth_blobs(
    k: int,
    per_class: int,
    dim: int,
    center_scale: float,
    noise: float,
    rng: Rng,
    centers: np.ndarray | None = None,
    split: str = "train",
) -> Dataset:
    """``per_class`` points around each of ``k`` Gaussian centres, in class-major order.

    Pass shared ``centers`` (from :func:`blob_centers`) to draw train and test
    splits of the same distribution from different streams.
    """
    if k < 2 or per_class < 1 or dim < 1:
        raise InvalidParameterError("need k >= 2, per_class >= 1 and dim >= 1")
    if center_scale < 0 or noise < 0:
        raise InvalidParameterError("scales must be non-negative")
    if centers is None:
        centers = blob_centers(k, dim, center_scale, rng.child("centers"))
    if centers.shape != (k, dim):
        raise InvalidParameterError(f"centers must have shape ({k}, {dim})")
    labels = np.repeat(np.arange(k), per_class)
    inputs = centers[labels] + rng.child("noise").normal(0.0, noise, size=(k * per_class, dim))
    return Dataset(inputs, labels, k, split)


def _read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    size = raw.size
    if size == 0 or size % CIFAR_RECORD:
        offset = size - size % CIFAR_RECORD
        raise FormatError(
            f"{path}: size {size} is not a positive multiple of {CIFAR_RECORD}; partial record at byte {offset}",
            offset=offset,
        )
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        offset = int(bad[0]) * CIFAR_RECORD
        raise FormatError(f"{path}: label byte {labels[bad[0]]} > 9 at byte {offset}", offset=offset)
    return rec[:, 1:].astype(np.float64) / 255.0, labels.astype(np.int64)


def load_cifar10(paths, subset: int | None, rng: Rng, test_path=None) -> tuple[Dataset, Dataset]:
    """Read CIFAR-10 binary batches; returns ``(train, test)``.

    ``test_path`` defaults to the entry of ``paths`` whose name starts with
    ``test_batch``; every other path is training data. Pixels are divided by
    255 and flattened in file order (three 1024-byte channel planes). A
    training ``subset`` is drawn by a seeded shuffle then truncation.
    """
    paths = [os.fspath(p) for p in paths]
    if test_path is None:
        tests = [p for p in paths if os.path.basename(p).startswith("test_batch")]
        if len(tests) != 1:
            raise InvalidParameterError("exactly one test_batch file is required when test_path is not given")
        test_path = tests[0]
    train_paths = [p for p in paths if p != os.fspath(test_path)]
    if not train_paths:
        raise InvalidParameterError("no training files")
    parts = [_read_cifar_file(p) for p in train_paths]
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    if subset is not None:
        if subset < 1:
            raise InvalidParameterError("subset must be >= 1")
        idx = rng.permutation(x.shape[0])[:subset]
        x, y = x[idx], y[idx]
    tx, ty = _read_cifar_file(test_path)
    return Dataset(x, y, CIFAR_CLASSES, "train"), Dataset(tx, ty, CIFAR_CLASSES, "test")


def shuffle_labels(ds: Dataset, fraction: float, rng: Rng) -> Dataset:
    """Resample the labels of a seeded ``fraction`` of examples uniformly from ``{0..k-1}``."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidParameterError(f"fraction must lie in [0, 1], got {fraction}")
    m = int(round(fraction * ds.n))
    if m == 0:
        return ds
    idx = rng.child("which").choice(ds.n, size=m, replace=False)
    labels = ds.labels.copy()
    labels[idx] = rng.child("labels").integers(0, ds.k, size=m)
    return Dataset(ds.inputs, labels, ds.k, ds.split)


# ---------------------------------------------------------------------------
# gradient dumps
# ---------------------------------------------------------------------------

DUMP_MAGIC = b"PEGD"
DUMP_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


@dataclass(frozen=True)
class GradDump:
    grads: np.ndarray
    labels: np.ndarray
    k: int

    @property
    def n(self) -> int:
        return self.grads.shape[0]

    @property
    def d(self) -> int:
        return self.grads.shape[1]


def write_grad_dump(path, grads, labels, k: int) -> None:
    """Header ``PEGD | u32 version | u64 n | u64 d | u64 k``, then ``n*d`` float64 and ``n`` u64 labels, all little-endian."""
    g = np.asarray(grads, dtype=np.float64)
    lab = np.asarray(labels)
    if g.ndim != 2 or lab.shape != (g.shape[0],):
        raise InvalidParameterError(f"grads {g.shape} and labels {lab.shape} do not match")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise InvalidParameterError(f"labels must lie in [0, {k})")
    n, d = g.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, n, d, k))
        f.write(g.astype("<f8").tobytes())
        f.write(lab.astype("<u8").tobytes())


def read_grad_dump(path) -> GradDump:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header", offset=len(blob))
    magic, version, n, d, k = _HEADER.unpack_from(blob)
    if magic != DUMP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != DUMP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = _HEADER.size + 8 * n * d + 8 * n
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}", offset=min(len(blob), expected))
    off = _HEADER.size
    grads = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).astype(np.float64).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<u8", count=n, offset=off + 8 * n * d).astype(np.int64)
    if labels.size and labels.max() >= k:
        raise FormatError(f"{path}: label out of range for k = {k}", offset=off + 8 * n * d)
    return GradDump(grads, labels, int(k))
