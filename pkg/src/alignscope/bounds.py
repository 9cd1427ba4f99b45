"""Concentration bounds for mean-gradient estimates and one-step descent certificates.

All sample-based bounds assume gradient samples lie in the unit ball. Use
:func:`to_unit_ball` and :func:`rescale_bound` when the Lipschitz constant
is not 1.

A Monte-Carlo harness (:func:`run_coverage`) draws datasets from a
:class:`TruthSpec` with known mean and covariance and counts how often each
bound fails.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import stats as sps

from .errors import InvalidParameterError
from .numkit import Rng, top_eigenvalue

BOUND_IDS = (
    "bennett_direction",
    "matrix_bernstein_norm",
    "empirical_bernstein_direction",
    "dim_variance",
    "covariance_gap",
    "one_step_descent",
    "grad_progress",
)

# degree of homogeneity in the gradient scale, for rescaling unit-ball bounds
_BOUND_DEGREE = {
    "bennett_direction": 2,
    "matrix_bernstein_norm": 1,
    "empirical_bernstein_direction": 2,
    "dim_variance": 1,
    "covariance_gap": 4,
}


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise InvalidParameterError(f"delta must lie in (0, 1), got {delta}")


def _check_n(n):
    if n < 1:
        raise InvalidParameterError(f"sample count must be >= 1, got {n}")


class GradSampleStats:
    """Empirical mean, covariance and variance of ``n`` gradient samples.

    The covariance ``(1/(n-1)) sum (g_i - mean)(g_i - mean)^T`` is never formed;
    quadratic forms and its top eigenvalue go through the centred samples.
    """

    def __init__(self, samples):
        g = np.asarray(samples, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] < 2:
            raise InvalidParameterError(f"need an (n >= 2, d) sample array, got shape {g.shape}")
        self.samples = g
        self.n, self.d = g.shape
        # shift by the first sample so identical samples centre to exactly zero
        shifted = g - g[0]
        offset = shifted.mean(axis=0)
        self.mean = g[0] + offset
        self.centered = shifted - offset

    @cached_property
    def v_emp(self) -> float:
        """Total empirical variance, the trace of the empirical covariance."""
        return float(np.einsum("ij,ij->", self.centered, self.centered)) / (self.n - 1)

    def quad(self, u) -> float:
        """``u^T Sigma_hat u``."""
        cu = self.centered @ np.asarray(u, dtype=np.float64)
        return float(cu @ cu) / (self.n - 1)

    def cov_matvec(self, v):
        return self.centered.T @ (self.centered @ v) / (self.n - 1)

    def covariance(self) -> np.ndarray:
        return self.centered.T @ self.centered / (self.n - 1)

    @cached_property
    def sigma1_sq(self) -> float:
        if self.d <= self.n:
            return top_eigenvalue(self.covariance())
        # the nonzero spectrum of C^T C equals that of C C^T
        return top_eigenvalue(self.centered @ self.centered.T) / (self.n - 1)


@dataclass
class TruthSpec:
    """A gradient distribution at a point ``x`` with exactly known moments.

    ``sampler(rng, n)`` returns ``n`` gradient samples at ``x``. When the
    distribution comes from a family of loss functions, ``population_loss``
    and ``population_grad`` evaluate ``F`` and its gradient anywhere and
    ``smoothness`` bounds its Hessian.
    """

    name: str
    mean: np.ndarray
    cov: np.ndarray
    lipschitz: float
    sampler: Callable[[Rng, int], np.ndarray]
    x: np.ndarray | None = None
    smoothness: float = 0.0
    population_loss: Callable[[np.ndarray], float] | None = None
    population_grad: Callable[[np.ndarray], np.ndarray] | None = None
    notes: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        return self.sampler(rng, n)

    def dir_variance(self) -> float:
        return float(self.mean @ self.cov @ self.mean)

    def trace(self) -> float:
        return float(np.trace(self.cov))

    def sigma1_sq(self) -> float:
        return top_eigenvalue(self.cov)


def to_unit_ball(samples, lipschitz: float) -> np.ndarray:
    if not lipschitz > 0:
        raise InvalidParameterError("lipschitz constant must be positive")
    return np.asarray(samples, dtype=np.float64) / lipschitz


def rescale_bound(bound_id: str, value: float, lipschitz: float) -> float:
    """Map a bound computed on ``samples / lipschitz`` back to the original scale."""
    return value * lipschitz ** _BOUND_DEGREE[bound_id]


# ---------------------------------------------------------------------------
# bound evaluators
# ---------------------------------------------------------------------------


def bennett_direction_bound(n: int, delta: float, dir_variance: float, G_norm: float) -> float:
    """High-probability bound on ``-<G_hat, G> + ||G||^2`` (``dir_variance = G^T Sigma G``)."""
    _check_delta(delta)
    _check_n(n)
    log = math.log(1.0 / delta)
    return math.sqrt(2.0 * dir_variance * log / n) + G_norm * log / (3.0 * n)


def matrix_bernstein_norm_bound(n: int, d: int, delta: float, V_sq: float) -> float:
    """Bound on ``||G_hat - G||`` from the rectangular matrix Bernstein inequality; ``V_sq = tr(Sigma)``."""
    _check_delta(delta)
    _check_n(n)
    log = math.log((d + 1) / delta)
    return 2.0 * math.sqrt(V_sq * log / n) + 4.0 * log / (3.0 * n)


def empirical_bernstein_direction_bound(stats: GradSampleStats, delta: float, direction) -> float:
    """Empirical-Bernstein bound on ``|<G, G_hat> - ||G||^2|``, using ``direction`` in place of ``G``."""
    _check_delta(delta)
    u = np.asarray(direction, dtype=np.float64)
    log = math.log(4.0 / delta)
    n = stats.n
    return math.sqrt(4.0 * stats.quad(u) * log / n) + 7.0 * float(np.linalg.norm(u)) * log / (3.0 * (n - 1))


def empirical_dim_variance_bound(stats: GradSampleStats, delta: float, d: int | None = None) -> float:
    """Coordinate-wise empirical-Bernstein bound on ``||G_hat - G||``."""
    _check_delta(delta)
    d = stats.d if d is None else d
    n = stats.n
    log = math.log(4.0 * d / delta)
    return math.sqrt(8.0 * stats.v_emp * log / n) + 7.0 * log * math.sqrt(2.0 * d) / (3.0 * (n - 1))


def covariance_gap_bound(stats: GradSampleStats, delta: float) -> float:
    """Bound on ``|G^T Sigma_hat G - G_hat^T Sigma_hat G_hat|``.

    Writes ``G = G_hat + eps`` and bounds ``2|eps^T S G_hat| + eps^T S eps`` by
    Cauchy-Schwarz in the ``S`` inner product, with ``||eps||`` controlled by
    :func:`empirical_dim_variance_bound` at the same ``delta``.
    """
    eps = empirical_dim_variance_bound(stats, delta, stats.d)
    s1 = stats.sigma1_sq
    return 2.0 * eps * math.sqrt(s1) * math.sqrt(stats.quad(stats.mean)) + eps * eps * s1


def _check_eta(eta, smoothness):
    if not eta > 0:
        raise InvalidParameterError(f"step size must be positive, got {eta}")
    if smoothness > 0 and eta > 1.0 / (2.0 * smoothness) * (1 + 1e-12):
        raise InvalidParameterError(f"step size {eta} exceeds 1/(2L) = {1.0 / (2.0 * smoothness)}")


def _check_point(truth: TruthSpec, x):
    if x is None or truth.x is None:
        return
    if not np.array_equal(np.asarray(x, dtype=np.float64), truth.x):
        raise InvalidParameterError("truth moments were computed at a different point")


def descent_lemma_check(truth: TruthSpec, x, G_hat, eta: float, atol: float = 1e-10):
    """Evaluate both sides of the smoothness upper bound for one step along ``-G_hat``.

    Returns ``(lhs, rhs, holds)`` with ``lhs = F(x - eta G_hat) - F(x)`` and
    ``rhs = -eta <G_hat, grad F(x)> + eta^2 L/2 ||G_hat||^2``.
    """
    if truth.population_loss is None or truth.population_grad is None:
        raise InvalidParameterError("truth has no closed-form population loss")
    _check_eta(eta, truth.smoothness)
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(G_hat, dtype=np.float64)
    lhs = truth.population_loss(x - eta * g) - truth.population_loss(x)
    rhs = -eta * float(g @ truth.population_grad(x)) + eta * eta * truth.smoothness / 2.0 * float(g @ g)
    return float(lhs), float(rhs), bool(lhs <= rhs + atol)


def one_step_descent_bound(truth: TruthSpec, x, N: int, eta: float, delta: float) -> float:
    """Certified upper bound on ``F(x - eta grad F_hat(x)) - F(x)`` from ``N`` samples.

    The variance term uses ``log(1/delta)`` and the range term ``log(2/delta)``,
    exactly as stated by the underlying theorem.
    """
    _check_delta(delta)
    if N < 1:
        raise InvalidParameterError("N must be >= 1")
    _check_point(truth, x)
    grad = truth.mean
    gnorm = float(np.linalg.norm(grad))
    lip, L = truth.lipschitz, truth.smoothness
    return (
        -eta * gnorm**2
        + eta * 4.0 * math.sqrt(max(truth.dir_variance(), 0.0) * math.log(1.0 / delta)) / math.sqrt(N)
        + eta * 2.0 * lip * gnorm * math.log(2.0 / delta) / (3.0 * N)
        + L * eta**2 * lip**2 / 2.0
    )


def grad_progress_bound(truth: TruthSpec, x, n: int, eta: float, delta: float):
    """Explicit-constant progress bound for one step along the empirical mean gradient.

    Composes the two-term smoothness inequality with the Bennett direction
    bound and the matrix-Bernstein norm bound, each at ``delta / 2``::

        -eta ||G||^2 / 2 + eta * direction(delta/2) + eta^2 L * norm(delta/2)^2

    Returns ``(bound, terms)``; ``terms`` holds each piece separately, the raw
    direction and norm bounds, and the top covariance eigenvalue (reported
    only).
    """
    _check_delta(delta)
    _check_n(n)
    _check_point(truth, x)
    _check_eta(eta, truth.smoothness)
    lip = truth.lipschitz
    G = truth.mean / lip
    gnorm = float(np.linalg.norm(G))
    cov = truth.cov / lip**2
    direction = lip**2 * bennett_direction_bound(n, delta / 2.0, float(G @ cov @ G), gnorm)
    norm = lip * matrix_bernstein_norm_bound(n, truth.dim, delta / 2.0, float(np.trace(cov)))
    gnorm *= lip
    terms = {
        "descent": -eta * gnorm**2 / 2.0,
        "direction": eta * direction,
        "norm": eta**2 * truth.smoothness * norm**2,
        "direction_raw": direction,
        "norm_raw": norm,
        "safe_step_threshold": direction / gnorm if gnorm > 0 else math.inf,
        "sigma1_sq": truth.sigma1_sq(),
    }
    return terms["descent"] + terms["direction"] + terms["norm"], terms


# ---------------------------------------------------------------------------
# truth distributions
# ---------------------------------------------------------------------------


def logistic_loss(u):
    return np.logaddexp(0.0, -np.asarray(u, dtype=np.float64))


def logistic_loss_derivative(u):
    u = np.asarray(u, dtype=np.float64)
    return -0.5 * (1.0 - np.tanh(u / 2.0))


LOGISTIC_SMOOTHNESS = 0.25


def orthonormal_feature_truth(
    d: int,
    x,
    loss_derivative: Callable = logistic_loss_derivative,
    loss: Callable | None = logistic_loss,
    smoothness: float = LOGISTIC_SMOOTHNESS,
) -> TruthSpec:
    """``f(y) = loss(<y, z>)`` with ``z`` uniform over the standard basis of ``R^d``.

    Moments at ``x`` follow by enumerating the ``d`` outcomes: with
    ``a_k = loss'(x_k)``, the mean is ``a / d`` and the covariance is
    ``diag(a^2) / d - a a^T / d^2``.
    """
    if d < 1:
        raise InvalidParameterError("d must be >= 1")
    x = np.array(x, dtype=np.float64)
    if x.shape != (d,):
        raise InvalidParameterError(f"x must have shape ({d},), got {x.shape}")
    x.setflags(write=False)
    a = np.broadcast_to(np.asarray(loss_derivative(x), dtype=np.float64), (d,)).copy()
    if np.any(np.abs(a) > 1.0 + 1e-12):
        raise InvalidParameterError("loss derivative must be bounded by 1")
    mean = a / d
    cov = np.diag(a * a) / d - np.outer(mean, mean)

    def sampler(rng: Rng, n: int) -> np.ndarray:
        k = rng.integers(0, d, size=n)
        g = np.zeros((n, d))
        g[np.arange(n), k] = a[k]
        return g

    population_loss = population_grad = None
    if loss is not None:

        def population_loss(y):
            return float(np.mean(loss(np.asarray(y, dtype=np.float64))))

        def population_grad(y):
            return np.asarray(loss_derivative(np.asarray(y, dtype=np.float64)), dtype=np.float64) / d

    return TruthSpec(
        name=f"orthonormal_d{d}",
        mean=mean,
        cov=cov,
        lipschitz=1.0,
        sampler=sampler,
        x=x,
        smoothness=smoothness,
        population_loss=population_loss,
        population_grad=population_grad,
        notes={"loss_derivative_values": a},
    )


def sample_orthonormal_feature_grads(
    d: int,
    n: int,
    x,
    loss_derivative: Callable = logistic_loss_derivative,
    rng: Rng | None = None,
    loss: Callable | None = logistic_loss,
    smoothness: float = LOGISTIC_SMOOTHNESS,
):
    """Draw ``n`` gradients from the orthonormal-feature model; returns ``(stats, truth)``."""
    truth = orthonormal_feature_truth(d, x, loss_derivative, loss, smoothness)
    rng = Rng(0) if rng is None else rng
    return GradSampleStats(truth.sample(rng, n)), truth


def clipped_noise_second_moment(d: int, radius: float) -> float:
    """``E[min(|Z|^2, r^2)] / d`` for standard normal ``Z`` in ``R^d``.

    Uses ``E[X 1{X <= t}] = d P(chi2_{d+2} <= t)`` for ``X ~ chi2_d``.
    """
    t = radius * radius
    return (d * sps.chi2.cdf(t, d + 2) + t * sps.chi2.sf(t, d)) / d


def clipped_gaussian_truth(
    d: int = 9,
    mean_norm: float = 0.3,
    noise_scale: float = 0.25,
    radius: float = 2.8,
) -> TruthSpec:
    """Gradients ``mu + s * clip_r(Z)`` for linear losses ``f(y) = <g, y>``.

    ``clip_r`` radially shrinks the isotropic Gaussian ``Z`` into the ball of
    radius ``r``. The clipped noise stays symmetric, so the mean is exactly
    ``mu`` and the covariance is ``s^2 E[min(|Z|^2, r^2)]/d * I``; with
    ``|mu| + s r <= 1`` every sample lies in the unit ball.
    """
    if mean_norm + noise_scale * radius > 1.0 + 1e-12:
        raise InvalidParameterError("mean_norm + noise_scale * radius must not exceed 1")
    mu = np.full(d, mean_norm / math.sqrt(d))
    cov = np.eye(d) * noise_scale**2 * clipped_noise_second_moment(d, radius)

    def sampler(rng: Rng, n: int) -> np.ndarray:
        z = rng.normal(size=(n, d))
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))
        return mu + noise_scale * z

    return TruthSpec(
        name=f"clipped_gaussian_d{d}",
        mean=mu,
        cov=cov,
        lipschitz=1.0,
        sampler=sampler,
        x=np.zeros(d),
        smoothness=0.0,
        population_loss=lambda y: float(mu @ y),
        population_grad=lambda y: mu.copy(),
    )


def quadratic_truth(A) -> TruthSpec:
    """Deterministic ``F(y) = y^T A y / 2`` with ``L = lambda_max(A)``; used for descent-lemma sweeps."""
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    L = float(np.linalg.eigvalsh(A).max())
    return TruthSpec(
        name=f"quadratic_d{d}",
        mean=np.zeros(d),
        cov=np.zeros((d, d)),
        lipschitz=math.inf,
        sampler=lambda rng, n: np.zeros((n, d)),
        smoothness=L,
        population_loss=lambda y: 0.5 * float(y @ A @ y),
        population_grad=lambda y: A @ y,
    )


# ---------------------------------------------------------------------------
# coverage harness
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    bound_id: str
    truth: str
    delta: float
    n: int
    trials: int
    failures: int
    threshold: float = field(init=False)
    failure_rate: float = field(init=False)
    holds: bool = field(init=False)

    def __post_init__(self):
        assert 0 <= self.failures <= self.trials
        self.failure_rate = self.failures / self.trials
        self.threshold = self.delta + 3.0 * math.sqrt(self.delta * (1.0 - self.delta) / self.trials)
        self.holds = self.failure_rate <= self.threshold

    def to_dict(self) -> dict:
        return {
            "bound": self.bound_id,
            "truth": self.truth,
            "delta": self.delta,
            "n": self.n,
            "trials": self.trials,
            "failures": self.failures,
            "failure_rate": self.failure_rate,
            "threshold": self.threshold,
            "verdict": "holds" if self.holds else "fails",
        }


def default_eta(truth: TruthSpec) -> float:
    return 1.0 if truth.smoothness == 0 else 1.0 / (2.0 * truth.smoothness)


def bound_sides(bound_id: str, truth: TruthSpec, samples, delta: float, eta: float | None = None):
    """``(lhs, rhs)`` of one bound on one dataset; the bound fails when ``lhs > rhs``."""
    if truth.lipschitz != 1.0:
        raise InvalidParameterError("normalize the truth to the unit ball before checking coverage")
    stats = GradSampleStats(samples)
    G, Gh = truth.mean, stats.mean
    n, d = stats.n, stats.d
    if bound_id == "bennett_direction":
        return -float(Gh @ G) + float(G @ G), bennett_direction_bound(n, delta, truth.dir_variance(), float(np.linalg.norm(G)))
    if bound_id == "matrix_bernstein_norm":
        return float(np.linalg.norm(Gh - G)), matrix_bernstein_norm_bound(n, d, delta, truth.trace())
    if bound_id == "empirical_bernstein_direction":
        return abs(float(G @ Gh) - float(G @ G)), empirical_bernstein_direction_bound(stats, delta, G)
    if bound_id == "dim_variance":
        return float(np.linalg.norm(Gh - G)), empirical_dim_variance_bound(stats, delta, d)
    if bound_id == "covariance_gap":
        return abs(stats.quad(G) - stats.quad(Gh)), covariance_gap_bound(stats, delta)
    if bound_id in ("one_step_descent", "grad_progress"):
        if truth.population_loss is None:
            raise InvalidParameterError(f"{bound_id} needs a truth with a population loss")
        eta = default_eta(truth) if eta is None else eta
        x = truth.x
        lhs = truth.population_loss(x - eta * Gh) - truth.population_loss(x)
        if bound_id == "one_step_descent":
            return lhs, one_step_descent_bound(truth, x, n, eta, delta)
        return lhs, grad_progress_bound(truth, x, n, eta, delta)[0]
    raise InvalidParameterError(f"unknown bound id {bound_id!r}; expected one of {BOUND_IDS}")


def run_coverage(
    bound_id: str,
    truth: TruthSpec,
    n: int,
    delta: float,
    trials: int,
    rng: Rng,
    eta: float | None = None,
    atol: float = 1e-12,
) -> BoundReport:
    """Count bound failures over ``trials`` independent ``n``-sample datasets.

    Trial ``t`` draws from its own child stream, so reports do not depend on
    evaluation order.
    """
    if bound_id not in BOUND_IDS:
        raise InvalidParameterError(f"unknown bound id {bound_id!r}; expected one of {BOUND_IDS}")
    if trials < 100:
        raise InvalidParameterError("coverage needs at least 100 trials")
    _check_delta(delta)
    failures = 0
    for t in range(trials):
        samples = truth.sample(rng.child(f"trial{t}"), n)
        lhs, rhs = bound_sides(bound_id, truth, samples, delta, eta)
        failures += lhs > rhs + atol
    return BoundReport(bound_id, truth.name, delta, n, trials, int(failures))
