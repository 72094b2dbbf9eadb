"""
Closed-form quantities of the Gaussian lab.

Under a diagonal Gaussian prior every approximation made by the guidance
has an exact counterpart: the posterior of x0 given y, the moments of x0
given x_t, and the exact gradient of log p(y | x_t). The functions here
compute them with dense linear algebra for small images.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .denoiser import (
    AnalyticDenoiser,
    GaussianPrior,
    analytic_predict_noise,
    conditional_mean,
    conditional_variance,
)
from .errors import DomainError
from .guidance import GuidanceConfig, guidance_step, likelihood_score, tweedie_x0
from .linops import LinearOperator
from .schedule import DiffusionSchedule


logger = logging.getLogger(__name__)


@dataclass
class GaussianPosterior:
    """Posterior N(mean, covariance) of the flattened image."""
    mean: np.ndarray
    covariance: np.ndarray


def exact_posterior(
    op: LinearOperator, prior: GaussianPrior, y: np.ndarray, sigma_y: float
) -> GaussianPosterior:
    """
    Posterior of x0 given y = A x0 + sigma_y * g under the prior.

    Uses the gain form mu0 + C0 A^T (A C0 A^T + sigma_y^2 I)^-1 (y - A mu0),
    which stays valid for sigma_y = 0 when A C0 A^T is invertible.
    """
    A = op.to_dense()
    mu0 = prior.mean.ravel()
    c0 = prior.variance.ravel()
    S = (A * c0) @ A.T + sigma_y ** 2 * np.eye(A.shape[0])
    gain = linalg.solve(S, A * c0, assume_a="pos").T
    mean = mu0 + gain @ (np.asarray(y).ravel() - A @ mu0)
    covariance = np.diag(c0) - gain @ (A * c0)
    return GaussianPosterior(mean=mean.reshape(prior.shape), covariance=covariance)


def lifted_baseline(op: LinearOperator, prior: GaussianPrior, y: np.ndarray) -> np.ndarray:
    """A^T y + (I - A^T A) mu0: y lifted back, prior mean in the null space."""
    mu0 = prior.mean
    return op.adjoint(y) + mu0 - op.adjoint(op.apply(mu0))


def _kernel_factor(A: np.ndarray, c: float, sigma_y: float):
    """Cholesky factor of c A A^T + sigma_y^2 I."""
    return linalg.cho_factor(c * A @ A.T + sigma_y ** 2 * np.eye(A.shape[0]))


def _dense_kernel(A: np.ndarray, c: float, sigma_y: float, v: np.ndarray) -> np.ndarray:
    return linalg.cho_solve(_kernel_factor(A, c, sigma_y), v)


def frozen_noise_log_likelihood(
    A: np.ndarray,
    schedule: DiffusionSchedule,
    x_t: np.ndarray,
    eps: np.ndarray,
    y: np.ndarray,
    t: int,
    sigma_y: float,
    factor: Optional[Tuple[np.ndarray, bool]] = None,
) -> float:
    """
    log N(y; A x0|t, c A A^T + sigma_y^2 I) up to a constant, with eps held fixed.

    x0|t is the Tweedie estimate from the frozen eps, so the value is a
    quadratic function of x_t whose gradient is the guidance score. Pass a
    precomputed Cholesky ``factor`` when evaluating repeatedly.
    """
    ab = schedule.alpha_bar(t)
    if factor is None:
        factor = _kernel_factor(A, (1.0 - ab) / ab, sigma_y)
    x0 = tweedie_x0(schedule, x_t, eps, t).ravel()
    r = np.asarray(y).ravel() - A @ x0
    return -0.5 * float(r @ linalg.cho_solve(factor, r))


def exact_likelihood_score(
    op: LinearOperator,
    prior: GaussianPrior,
    schedule: DiffusionSchedule,
    x_t: np.ndarray,
    y: np.ndarray,
    t: int,
    sigma_y: float,
    covariance: str = "fixed",
) -> np.ndarray:
    """
    Exact gradient of log p(y | x_t) through the exact MMSE mean.

    Args:
        covariance: 'fixed' uses c A A^T + sigma_y^2 I with c = (1 - ab)/ab;
            'exact' uses A Cov[x0|x_t] A^T + sigma_y^2 I, the true likelihood
            covariance under the prior

    Returns:
        Gradient with the shape of x_t
    """
    A = op.to_dense()
    ab = schedule.alpha_bar(t)
    mean = conditional_mean(prior, schedule, x_t, t).ravel()
    r = np.asarray(y).ravel() - A @ mean

    if covariance == "fixed":
        v = _dense_kernel(A, (1.0 - ab) / ab, sigma_y, r)
    elif covariance == "exact":
        V = conditional_variance(prior, schedule, t).ravel()
        S = (A * V) @ A.T + sigma_y ** 2 * np.eye(A.shape[0])
        v = linalg.solve(S, r, assume_a="pos")
    else:
        raise DomainError(f"unknown covariance '{covariance}'")

    dmean = (np.sqrt(ab) * prior.variance / (ab * prior.variance + 1.0 - ab)).ravel()
    return (dmean * (A.T @ v)).reshape(np.shape(x_t))


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3
) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty(flat.size)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / ||b||; 0 when both vanish."""
    scale = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    if scale == 0:
        return 0.0 if diff == 0 else float("inf")
    return diff / scale


@dataclass
class JacobianDeviation:
    """How far the guidance scores sit from the exact fixed-covariance gradient at one c0."""
    prior_variance: float
    t: int
    corrected_error: float
    uncorrected_error: float
    exact_covariance_gap: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "prior_variance": self.prior_variance,
            "t": self.t,
            "corrected_error": self.corrected_error,
            "uncorrected_error": self.uncorrected_error,
            "exact_covariance_gap": self.exact_covariance_gap,
        }


def jacobian_assumption_deviation(
    op: LinearOperator,
    prior: GaussianPrior,
    schedule: DiffusionSchedule,
    x_t: np.ndarray,
    y: np.ndarray,
    t: int,
    sigma_y: float,
) -> JacobianDeviation:
    """
    Compare the guidance score with and without the Jacobian term against
    the exact gradient of the fixed-covariance likelihood.

    ``exact_covariance_gap`` measures the remaining distance between the
    fixed-covariance gradient and the true gradient of log p(y | x_t).
    """
    denoiser = AnalyticDenoiser(prior, schedule)
    exact = exact_likelihood_score(op, prior, schedule, x_t, y, t, sigma_y, "fixed")
    true = exact_likelihood_score(op, prior, schedule, x_t, y, t, sigma_y, "exact")

    base = GuidanceConfig(sigma_y=sigma_y, use_svd=False, solve_method="direct"
                          if op.exact_kernel_solve else "iterative", solve_tol=1e-12)
    corrected = guidance_step(op, schedule, replace(base, jacobian_term=True), denoiser, x_t, y, t)
    plain = guidance_step(op, schedule, base, denoiser, x_t, y, t)
    return JacobianDeviation(
        prior_variance=float(np.mean(prior.variance)),
        t=t,
        corrected_error=relative_error(corrected.likelihood_score, exact),
        uncorrected_error=relative_error(plain.likelihood_score, exact),
        exact_covariance_gap=relative_error(exact, true),
    )


def compose_gaussian_marginal(
    alpha: float, v1: float, v2: float, z0: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """
    Draw z = alpha * x1 + sqrt(v2) * g2 with x1 ~ N(z0, v1).

    The draws follow N(alpha * z0, alpha^2 v1 + v2).
    """
    if v1 < 0 or v2 < 0:
        raise DomainError("variances must be >= 0")
    x1 = z0 + np.sqrt(v1) * rng.standard_normal(n)
    return alpha * x1 + np.sqrt(v2) * rng.standard_normal(n)


def moment_z_scores(samples: np.ndarray, mean: float, variance: float) -> Tuple[float, float]:
    """
    Standardized errors of the sample mean and sample variance.

    The variance standard error uses the Gaussian value sqrt(2/n) * variance.
    """
    n = samples.size
    z_mean = (float(np.mean(samples)) - mean) / np.sqrt(variance / n)
    z_var = (float(np.var(samples, ddof=1)) - variance) / (np.sqrt(2.0 / (n - 1)) * variance)
    return z_mean, z_var


def frozen_noise_score_check(
    op: LinearOperator,
    schedule: DiffusionSchedule,
    x_t: np.ndarray,
    eps: np.ndarray,
    y: np.ndarray,
    t: int,
    sigma_y: float,
    h: float = 1e-3,
) -> float:
    """Relative error between the guidance score and finite differences of the log-density."""
    A = op.to_dense()
    ab = schedule.alpha_bar(t)
    factor = _kernel_factor(A, (1.0 - ab) / ab, sigma_y)
    cfg = GuidanceConfig(sigma_y=sigma_y, use_svd=False, solve_tol=1e-12)
    x0 = tweedie_x0(schedule, x_t, eps, t)
    score = likelihood_score(op, schedule, cfg, x0, y, t)
    fd = finite_difference_gradient(
        lambda x: frozen_noise_log_likelihood(A, schedule, x, eps, y, t, sigma_y, factor), x_t, h
    )
    return relative_error(score, fd)


MMSE_OFFSETS = (("delta_+0.01", 0.01), ("delta_-0.01", -0.01), ("delta_+0.1", 0.1),
                ("delta_-0.1", -0.1))


def perturbed_predictors(
    prior: GaussianPrior, schedule: DiffusionSchedule, direction: np.ndarray
) -> List[Tuple[str, Callable[[np.ndarray, int], np.ndarray]]]:
    """
    Analytic predictor shifted along one fixed direction d.

    Offsets are eps* + delta * d for each entry of MMSE_OFFSETS, plus
    eps* + 0.5 * sign(d).
    """
    def optimal(x, t):
        return analytic_predict_noise(prior, schedule, x, t)

    predictors: List[Tuple[str, Callable[[np.ndarray, int], np.ndarray]]] = [
        (name, lambda x, t, delta=delta: optimal(x, t) + delta * direction)
        for name, delta in MMSE_OFFSETS
    ]
    predictors.append(("sign_0.5", lambda x, t: optimal(x, t) + 0.5 * np.sign(direction)))
    return predictors


def mmse_comparison(
    prior: GaussianPrior,
    schedule: DiffusionSchedule,
    t: int,
    n: int,
    rng: np.random.Generator,
    batch_size: int = 4096,
) -> Dict[str, Tuple[float, float]]:
    """
    Paired excess squared error of each perturbed predictor over the analytic one.

    Draws one standard-normal direction of the prior's shape, then n samples
    of (x0, eps) in batches, and returns for every perturbed predictor
    (mean per-draw excess, standard error of that mean).
    """
    ab = schedule.alpha_bar(t)
    direction = rng.standard_normal(prior.shape)
    excess: Dict[str, List[np.ndarray]] = {}
    done = 0
    while done < n:
        count = min(batch_size, n - done)
        shape = (count,) + prior.shape
        x0 = prior.mean + np.sqrt(prior.variance) * rng.standard_normal(shape)
        eps = rng.standard_normal(shape)
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

        batch_prior = GaussianPrior(
            np.broadcast_to(prior.mean, shape), np.broadcast_to(prior.variance, shape)
        )
        best = (analytic_predict_noise(batch_prior, schedule, x_t, t) - eps) ** 2
        for name, predictor in perturbed_predictors(batch_prior, schedule, direction):
            per_draw = ((predictor(x_t, t) - eps) ** 2 - best).reshape(count, -1).mean(axis=1)
            excess.setdefault(name, []).append(per_draw)
        done += count

    results = {}
    for name, parts in excess.items():
        values = np.concatenate(parts)
        results[name] = (float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values))))
    return results


def sweep_prior_variance(
    op: LinearOperator,
    schedule: DiffusionSchedule,
    shape: Sequence[int],
    variances: Sequence[float],
    t: int,
    sigma_y: float,
    rng: np.random.Generator,
    prior_mean: float = 0.5,
) -> List[JacobianDeviation]:
    """Jacobian deviations over a range of isotropic prior variances on one shared draw."""
    shape = tuple(shape)
    x_t = rng.standard_normal(shape)
    y = op.apply(prior_mean + 0.1 * rng.standard_normal(shape))
    return [
        jacobian_assumption_deviation(
            op, GaussianPrior.isotropic(shape, prior_mean, v), schedule, x_t, y, t, sigma_y
        )
        for v in variances
    ]
