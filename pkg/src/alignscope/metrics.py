"""Gradient and representation alignment statistics.

Every statistic here depends on the vectors only through their pairwise
inner products, so a :class:`VectorSet` can be backed either by explicit
``(n, d)`` vectors or by an ``(n, n)`` Gram matrix. The Gram form lets the
training harness score per-example weight gradients of a wide layer without
ever materializing them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError, UndefinedMetricError
from .numkit import Rng

DEFAULT_PAIR_BUDGET = 100_000


class VectorSet:
    """``n`` vectors (optionally labelled), stored explicitly or as a Gram matrix."""

    def __init__(self, vectors=None, labels=None, *, gram=None):
        if (vectors is None) == (gram is None):
            raise InvalidParameterError("give exactly one of vectors or gram")
        if vectors is not None:
            v = np.asarray(vectors, dtype=np.float64)
            if v.ndim == 1:
                v = v[:, None]
            if v.ndim != 2:
                raise InvalidParameterError(f"vectors must be 2-D, got shape {v.shape}")
            if not np.isfinite(v).all():
                raise InvalidParameterError("vectors contain non-finite entries")
            self.vectors, self.gram_matrix = v, None
            self.n = v.shape[0]
        else:
            g = np.asarray(gram, dtype=np.float64)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise InvalidParameterError(f"gram must be square, got shape {g.shape}")
            if not np.isfinite(g).all():
                raise InvalidParameterError("gram contains non-finite entries")
            self.vectors, self.gram_matrix = None, g
            self.n = g.shape[0]
        self.labels = None
        if labels is not None:
            lab = np.asarray(labels, dtype=np.int64)
            if lab.shape != (self.n,):
                raise InvalidParameterError(f"{self.n} vectors but labels of shape {lab.shape}")
            self.labels = lab

    @classmethod
    def from_gram(cls, gram, labels=None) -> "VectorSet":
        return cls(labels=labels, gram=gram)

    def subset(self, idx) -> "VectorSet":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        if self.vectors is not None:
            return VectorSet(self.vectors[idx], labels)
        return VectorSet(labels=labels, gram=self.gram_matrix[np.ix_(idx, idx)])

    def sq_norms(self) -> np.ndarray:
        if self.vectors is not None:
            return np.einsum("ij,ij->i", self.vectors, self.vectors)
        return np.clip(np.diag(self.gram_matrix).copy(), 0.0, None)

    def norms(self) -> np.ndarray:
        return np.sqrt(self.sq_norms())

    def sum_sq_norm(self) -> float:
        """``||sum_i v_i||^2``."""
        if self.vectors is not None:
            s = self.vectors.sum(axis=0)
            return float(s @ s)
        return float(max(self.gram_matrix.sum(), 0.0))

    def inner_with_sum(self) -> np.ndarray:
        """``<v_i, sum_j v_j>`` for every i."""
        if self.vectors is not None:
            return self.vectors @ self.vectors.sum(axis=0)
        return self.gram_matrix.sum(axis=1)

    def gram(self) -> np.ndarray:
        if self.gram_matrix is not None:
            return self.gram_matrix
        return self.vectors @ self.vectors.T

    def pair_inner(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        if self.gram_matrix is not None:
            return self.gram_matrix[i, j]
        return np.einsum("ij,ij->i", self.vectors[i], self.vectors[j])


def as_vector_set(data, labels=None) -> VectorSet:
    if isinstance(data, VectorSet):
        if labels is not None:
            return VectorSet(data.vectors, labels) if data.vectors is not None else VectorSet.from_gram(data.gram_matrix, labels)
        return data
    return VectorSet(data, labels)


def _alignment_parts(vs: VectorSet) -> tuple[float, float, float]:
    s = vs.sum_sq_norm()
    sq = vs.sq_norms()
    return s, float(sq.sum()), float(np.sqrt(sq).sum())


def alignment(data) -> float:
    """Mean pairwise inner product over ordered pairs, normalized by the squared mean norm.

    Uses ``sum_{i != j} <v_i, v_j> = ||sum v||^2 - sum ||v||^2`` so the cost is
    linear in ``n``.
    """
    vs = as_vector_set(data)
    n = vs.n
    if n < 2:
        raise UndefinedMetricError(f"alignment needs at least 2 vectors, got {n}")
    s, q, m = _alignment_parts(vs)
    if m == 0.0:
        raise UndefinedMetricError("alignment is undefined when every vector is zero")
    return n * (s - q) / ((n - 1) * m * m)


@dataclass
class AlignmentReport:
    omega: float
    per_class: np.ndarray
    omega_in_class: float
    counts: np.ndarray
    excluded: list = field(default_factory=list)

    def defined(self) -> np.ndarray:
        return ~np.isnan(self.per_class)


def class_alignment(data, labels=None, k: int | None = None) -> AlignmentReport:
    """Per-class alignment and their mean over classes where it is defined.

    Classes with fewer than two members, or whose vectors are all zero, are
    left as NaN in ``per_class``, listed in ``excluded`` and skipped in the
    mean.
    """
    vs = as_vector_set(data, labels)
    if vs.labels is None:
        raise InvalidParameterError("class alignment needs labels")
    if k is None:
        k = int(vs.labels.max()) + 1 if vs.n else 0
    if vs.n and (vs.labels.min() < 0 or vs.labels.max() >= k):
        raise InvalidParameterError(f"labels must lie in [0, {k})")

    per_class = np.full(k, np.nan)
    counts = np.bincount(vs.labels, minlength=k) if vs.n else np.zeros(k, dtype=np.int64)
    excluded = []
    for c in range(k):
        idx = np.flatnonzero(vs.labels == c)
        if idx.size < 2:
            excluded.append(c)
            continue
        try:
            per_class[c] = alignment(vs.subset(idx))
        except UndefinedMetricError:
            excluded.append(c)
    ok = ~np.isnan(per_class)
    if not ok.any():
        raise UndefinedMetricError("no class has two or more members with nonzero norm")
    try:
        omega = alignment(vs)
    except UndefinedMetricError:
        omega = float("nan")
    return AlignmentReport(
        omega=omega,
        per_class=per_class,
        omega_in_class=float(per_class[ok].mean()),
        counts=counts,
        excluded=excluded,
    )


def representation_alignment(reps, labels=None, k: int | None = None) -> AlignmentReport:
    """Class alignment of hidden representations instead of gradients."""
    return class_alignment(reps, labels, k)


def gradient_diversity(data) -> float:
    """``sum ||v_i||^2 / ||sum v_i||^2``; ``inf`` when the vectors sum to zero."""
    vs = as_vector_set(data)
    s, q, _ = _alignment_parts(vs)
    if s == 0.0:
        return math.inf
    return q / s


class PairStatistic(NamedTuple):
    value: float
    pairs: int
    skipped: int
    sampled: bool


def _pairs(n: int, pair_budget: int, rng: Rng | None):
    total = n * (n - 1)
    if total <= pair_budget:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        return i, j, False
    if rng is None:
        raise InvalidParameterError("pair sampling needs an rng")
    i = rng.integers(0, n, size=pair_budget)
    j = rng.integers(0, n - 1, size=pair_budget)
    j = j + (j >= i)
    return i, j, True


def cosine_stiffness(data, pair_budget: int = DEFAULT_PAIR_BUDGET, rng: Rng | None = None) -> PairStatistic:
    """Mean cosine similarity over ordered pairs ``i != j``.

    Exhaustive when ``n(n-1) <= pair_budget``; otherwise ``pair_budget``
    ordered pairs are drawn uniformly. Pairs involving a zero vector are
    skipped and counted.
    """
    vs = as_vector_set(data)
    if vs.n < 2:
        raise UndefinedMetricError("stiffness needs at least 2 vectors")
    norms = vs.norms()
    if not (norms > 0).any():
        raise UndefinedMetricError("stiffness is undefined when every vector is zero")
    i, j, sampled = _pairs(vs.n, pair_budget, rng)
    ok = (norms[i] > 0) & (norms[j] > 0)
    skipped = int((~ok).sum())
    i, j = i[ok], j[ok]
    if i.size == 0:
        raise UndefinedMetricError("no pair of nonzero vectors")
    if vs.vectors is not None:
        # 1 - |u_i - u_j|^2 / 2 on unit vectors: exactly 1.0 for parallel pairs
        unit = vs.vectors / np.where(norms > 0, norms, 1.0)[:, None]
        diff = unit[i] - unit[j]
        cos = 1.0 - 0.5 * np.einsum("ij,ij->i", diff, diff)
    else:
        cos = vs.pair_inner(i, j) / (norms[i] * norms[j])
    return PairStatistic(float(np.clip(cos, -1.0, 1.0).mean()), int(i.size), skipped, sampled)


def gradient_confusion(data, pair_budget: int = DEFAULT_PAIR_BUDGET, rng: Rng | None = None) -> PairStatistic:
    """Minimum pairwise inner product (over sampled pairs when above budget)."""
    vs = as_vector_set(data)
    if vs.n < 2:
        raise UndefinedMetricError("confusion needs at least 2 vectors")
    i, j, sampled = _pairs(vs.n, pair_budget, rng)
    return PairStatistic(float(vs.pair_inner(i, j).min()), int(i.size), 0, sampled)


def _mean_norm(vs: VectorSet) -> float:
    return math.sqrt(vs.sum_sq_norm()) / vs.n


def nec(data) -> float:
    """Normalized empirical covariance complexity, evaluated literally.

    The deviations from the mean sum to zero, so the exact value is always 0;
    the computed value is floating-point round-off.
    """
    vs = as_vector_set(data)
    if vs.n < 1:
        raise UndefinedMetricError("empty set")
    if vs.vectors is not None:
        mean = vs.vectors.mean(axis=0)
        mnorm = float(np.linalg.norm(mean))
        if mnorm == 0.0:
            raise UndefinedMetricError("mean gradient is zero")
        proj = (vs.vectors - mean) @ (mean / mnorm)
    else:
        mnorm = _mean_norm(vs)
        if mnorm == 0.0:
            raise UndefinedMetricError("mean gradient is zero")
        # <v_i - m, m/|m|> with <v_i, m> = (K 1)_i / n
        proj = (vs.inner_with_sum() / vs.n - mnorm * mnorm) / mnorm
    return float(proj.mean() / mnorm)


class RademacherSummary(NamedTuple):
    mean: float
    std: float
    samples: np.ndarray


def empirical_rademacher_alignment(data, num_sign_draws: int, rng: Rng) -> RademacherSummary:
    """``[(1/sqrt(N)) sum_i <s_i v_i, m/|m|>] / |m|`` for independent sign vectors ``s``."""
    vs = as_vector_set(data)
    if num_sign_draws < 1:
        raise InvalidParameterError("num_sign_draws must be >= 1")
    n = vs.n
    if vs.vectors is not None:
        mean = vs.vectors.mean(axis=0)
        mnorm = float(np.linalg.norm(mean))
        if mnorm == 0.0:
            raise UndefinedMetricError("mean gradient is zero")
        proj = vs.vectors @ (mean / mnorm)
    else:
        mnorm = _mean_norm(vs)
        if mnorm == 0.0:
            raise UndefinedMetricError("mean gradient is zero")
        proj = vs.inner_with_sum() / n / mnorm
    signs = rng.rademacher((num_sign_draws, n))
    samples = signs @ proj / (math.sqrt(n) * mnorm)
    std = float(samples.std(ddof=1)) if num_sign_draws > 1 else 0.0
    return RademacherSummary(float(samples.mean()), std, samples)


def grad_param_norm_ratio(layer_grad, layer_weights) -> float:
    """Frobenius norm of a layer's gradient over that of its weights."""
    w = float(np.linalg.norm(np.asarray(layer_weights, dtype=np.float64)))
    if w == 0.0:
        raise UndefinedMetricError("weights are zero")
    return float(np.linalg.norm(np.asarray(layer_grad, dtype=np.float64))) / w
