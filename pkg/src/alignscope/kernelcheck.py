"""Monte-Carlo checks of the sin-activation decorrelation bound and the random-Fourier-feature kernel.

Each draw samples a fresh first layer ``W_1`` (``h x p``, entries
``N(0, sigma^2)``) and evaluates ``<sin(W_1 x), sin(W_1 x')>``. Draws are
grouped in blocks of :data:`BLOCK` with one child stream per block, so the
estimate does not depend on how the work is chunked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .numkit import Rng

BLOCK = 1000
MIN_DRAWS = 30


@dataclass(frozen=True)
class KernelEstimate:
    estimate: float
    std_error: float
    draws: int
    h: int
    sigma: float

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.estimate - target) <= k * self.std_error


def gaussian_cos_expectation(t: float, s: float) -> float:
    """``E[cos(t Z)]`` for ``Z ~ N(0, s^2)``."""
    return math.exp(-0.5 * (t * s) ** 2)


def sin_kernel_bound(x, x_prime, sigma: float, h: int) -> float:
    """``h exp(-sigma^2 |x - x'|^2 / 2)``."""
    if sigma < 0:
        raise InvalidParameterError("sigma must be >= 0")
    dist = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(x_prime, dtype=np.float64)))
    return h * gaussian_cos_expectation(dist, sigma)


def sin_kernel_exact(x, x_prime, sigma: float, h: int) -> float:
    """Closed form of the expectation the MC estimator targets.

    ``sin a sin b = (cos(a - b) - cos(a + b)) / 2`` with ``a - b`` and ``a + b``
    Gaussian, so each unit contributes
    ``(exp(-s^2|x - x'|^2/2) - exp(-s^2|x + x'|^2/2)) / 2``.
    """
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    return h * 0.5 * (
        gaussian_cos_expectation(float(np.linalg.norm(x - xp)), sigma)
        - gaussian_cos_expectation(float(np.linalg.norm(x + xp)), sigma)
    )


def rff_kernel_target(x, x_prime, sigma: float, h: int) -> float:
    """``(h/2) exp(-sigma^2 |x - x'|^2 / 2)``: averaging over the phase leaves ``cos(w.(x - x'))/2`` per unit."""
    return 0.5 * sin_kernel_bound(x, x_prime, sigma, h)


def _mc(x, x_prime, sigma, h, draws, rng, with_phase):
    if draws < MIN_DRAWS:
        raise InvalidParameterError(f"draws must be >= {MIN_DRAWS}")
    if sigma < 0 or h < 1:
        raise InvalidParameterError("need sigma >= 0 and h >= 1")
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    if x.shape != xp.shape or x.ndim != 1:
        raise InvalidParameterError("x and x_prime must be vectors of equal length")
    pair = np.stack([x, xp], axis=1)  # (p, 2)
    values = np.empty(draws)
    for b, start in enumerate(range(0, draws, BLOCK)):
        m = min(BLOCK, draws - start)
        r = rng.child(f"block{b}")
        w = r.normal(0.0, 1.0, size=(m, h, x.shape[0])) * sigma
        z = w @ pair  # (m, h, 2)
        if with_phase:
            z = z + r.uniform(0.0, 2.0 * math.pi, size=(m, h, 1))
        s = np.sin(z)
        values[start : start + m] = np.einsum("mh,mh->m", s[..., 0], s[..., 1])
    return KernelEstimate(float(values.mean()), float(values.std(ddof=1) / math.sqrt(draws)), draws, h, float(sigma))


def sin_kernel_mc(x, x_prime, sigma: float, h: int, draws: int, rng: Rng) -> KernelEstimate:
    """MC estimate of ``E_W[<sin(W x), sin(W x')>]`` over Gaussian first layers."""
    return _mc(x, x_prime, sigma, h, draws, rng, with_phase=False)


def rff_kernel_mc(x, x_prime, sigma: float, h: int, draws: int, rng: Rng) -> KernelEstimate:
    """MC estimate of ``E_{W,b}[<sin(W x + b), sin(W x' + b)>]`` with ``b`` uniform on ``[0, 2 pi]``."""
    return _mc(x, x_prime, sigma, h, draws, rng, with_phase=True)


def grid_pair(distance: float, dim: int = 8, rng: Rng | None = None):
    """Unit vector ``x`` and ``x' = x + distance * u`` with ``u`` a unit vector orthogonal to ``x``."""
    rng = Rng(0).child("grid_pair") if rng is None else rng
    v = rng.normal(size=(2, dim))
    x = v[0] / np.linalg.norm(v[0])
    u = v[1] - (v[1] @ x) * x
    u /= np.linalg.norm(u)
    return x, x + distance * u


GRID_SIGMAS = (0.05, 1.0, 10.0)
GRID_DISTANCES = (0.5, 1.0, 2.0)
GRID_COLUMNS = ("kind", "sigma", "distance", "estimate", "se", "bound", "pass")


def kernel_grid(
    sigmas=GRID_SIGMAS,
    distances=GRID_DISTANCES,
    h: int = 64,
    draws: int = 10_000,
    seed: int = 0,
    dim: int = 8,
) -> list[dict]:
    """Run both checks on every ``(sigma, distance)`` cell, plus the ``x = x'`` case per sigma.

    ``sin`` rows pass when ``|estimate| <= bound + 3 se``; ``rff`` rows pass
    when the estimate is within ``3 se`` of ``(h/2) exp(-sigma^2 d^2/2)``;
    ``sin_diag`` rows pass when the estimate is within ``3 se`` of
    ``h (1 - exp(-2 sigma^2 |x|^2)) / 2``.
    """
    root = Rng(seed).child("kernel_grid")
    rows = []
    for sigma in sigmas:
        for dist in distances:
            x, xp = grid_pair(dist, dim, root.child(f"pair{dist!r}"))
            cell = root.child(f"cell{sigma!r}/{dist!r}")
            est = sin_kernel_mc(x, xp, sigma, h, draws, cell.child("sin"))
            bound = sin_kernel_bound(x, xp, sigma, h)
            rows.append(_row("sin", sigma, dist, est, bound, abs(est.estimate) <= bound + 3 * est.std_error))
            est = rff_kernel_mc(x, xp, sigma, h, draws, cell.child("rff"))
            target = rff_kernel_target(x, xp, sigma, h)
            rows.append(_row("rff", sigma, dist, est, target, est.within(target)))
        x, _ = grid_pair(0.0, dim, root.child("diag"))
        est = sin_kernel_mc(x, x, sigma, h, draws, root.child(f"diag{sigma!r}"))
        target = sin_kernel_exact(x, x, sigma, h)
        rows.append(_row("sin_diag", sigma, 0.0, est, target, est.within(target)))
    return rows


def _row(kind, sigma, dist, est: KernelEstimate, bound, ok) -> dict:
    return {
        "kind": kind,
        "sigma": sigma,
        "distance": dist,
        "estimate": est.estimate,
        "se": est.std_error,
        "bound": bound,
        "pass": bool(ok),
    }
