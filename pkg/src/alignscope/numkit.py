"""Seeded random streams, weight initializers and a matrix-free power iteration."""
from __future__ import annotations

import math
import zlib
from typing import Callable

import numpy as np

from .errors import ConvergenceError, InvalidParameterError


def _label_key(label) -> int:
    return zlib.crc32(str(label).encode("utf-8"))


class Rng:
    """Counter-based (Philox) random stream with labelled child streams.

    ``Rng(7).child("init")`` and ``Rng(7).child("shuffle")`` are independent
    streams, and each is reproducible from the seed and the label path alone,
    independently of how much the parent has been consumed.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0:
            raise InvalidParameterError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, label) -> "Rng":
        return Rng(self.seed, self.path + (label,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def rademacher(self, size) -> np.ndarray:
        return 2.0 * self._gen.integers(0, 2, size=size).astype(np.float64) - 1.0

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def init_gaussian(rows: int, cols: int, sigma: float, rng: Rng) -> np.ndarray:
    """Matrix with i.i.d. Normal(0, sigma^2) entries."""
    if not (math.isfinite(sigma) and sigma >= 0):
        raise InvalidParameterError(f"sigma must be finite and >= 0, got {sigma}")
    if rows < 0 or cols < 0:
        raise InvalidParameterError(f"bad shape ({rows}, {cols})")
    return _frozen(rng.normal(0.0, 1.0, size=(rows, cols)) * sigma)


def glorot_limit(rows: int, cols: int) -> float:
    # fan_in = cols, fan_out = rows for a weight acting as W @ x
    return math.sqrt(6.0 / (rows + cols))


def init_glorot_uniform(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise InvalidParameterError(f"Glorot init needs positive dimensions, got ({rows}, {cols})")
    a = glorot_limit(rows, cols)
    return _frozen(rng.uniform(-a, a, size=(rows, cols)))


def top_eigenvalue(
    matvec: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    dim: int | None = None,
    max_iter: int = 10_000,
    rtol: float = 1e-10,
) -> float:
    """Largest eigenvalue of a symmetric PSD operator by power iteration.

    ``matvec`` is either a dense symmetric array or a callable applying the
    operator to a vector of length ``dim``. The eigenvalue estimate is the
    Rayleigh quotient; iteration stops once its relative change drops below
    ``rtol``.

    The start vector is a fixed pseudo-random direction rather than the
    all-ones vector, which is an exact null vector of centred covariances
    such as ``I/d - 11^T/d^2``.
    """
    if isinstance(matvec, np.ndarray):
        mat = matvec
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise InvalidParameterError(f"expected a square matrix, got shape {mat.shape}")
        dim = mat.shape[0]
        matvec = mat.__matmul__
    if dim is None or dim < 1:
        raise InvalidParameterError("dimension must be >= 1")

    v = np.random.Generator(np.random.Philox(0)).standard_normal(dim)
    v /= np.linalg.norm(v)
    w = np.asarray(matvec(v), dtype=np.float64)
    lam = float(v @ w)
    for _ in range(max_iter):
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        w = np.asarray(matvec(v), dtype=np.float64)
        new = float(v @ w)
        if abs(new - lam) <= rtol * max(abs(new), np.finfo(float).tiny):
            return new
        lam = new
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations (last estimate {lam!r})",
        last_iterate=v,
        last_value=lam,
    )
