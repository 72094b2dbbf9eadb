"""
Noise-refined likelihood guidance.

The likelihood score of a measurement y = A x0 + noise given x_t is
approximated by the gradient of log N(y; A x0|t, c A A^T + sigma_y^2 I)
with c = (1 - ab)/ab and x0|t the Tweedie estimate:

    score = (1/sqrt(ab)) A^T (c A A^T + sigma_y^2 I)^-1 (y - A x0|t)

The sign points toward data consistency (it is the gradient of the
log-density with the predicted noise held fixed). The score then refines
the predicted noise: eps_hat = eps - mu * sqrt(1 - ab) * score.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

import numpy as np

from .denoiser import Denoiser
from .errors import CapabilityError, DomainError
from .linops import LinearOperator, SolveMethod, SvdFactors
from .schedule import DiffusionSchedule


logger = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-10


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance knobs.

    Attributes:
        mu: Refinement strength (>= 0)
        zeta: Share of fresh noise in the sampling step, in [0, 1]
        sigma_y: Measurement noise standard deviation (>= 0)
        mean_correction: Use the Tweedie mean (on) or x_t/sqrt(ab) (off)
        jacobian_term: Multiply by (I - sqrt(1-ab) d eps/d x_t); analytic denoisers only
        use_svd: Prefer the SVD path when the operator exposes factors
        solve_method: Kernel-solve method when the SVD path is not used
        solve_tol: Relative tolerance of the iterative kernel solve
        ridge: sigma_y^2 substitute for noiseless problems without an exact solve
    """
    mu: float = 1.0
    zeta: float = 1.0
    sigma_y: float = 0.0
    mean_correction: bool = True
    jacobian_term: bool = False
    use_svd: bool = True
    solve_method: str = SolveMethod.AUTO.value
    solve_tol: float = 1e-8
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu < 0:
            raise DomainError(f"mu must be >= 0, got {self.mu}")
        if not 0.0 <= self.zeta <= 1.0:
            raise DomainError(f"zeta must be in [0, 1], got {self.zeta}")
        if not np.isfinite(self.sigma_y) or self.sigma_y < 0:
            raise DomainError(f"sigma_y must be >= 0, got {self.sigma_y}")
        if self.ridge <= 0 or self.solve_tol <= 0:
            raise DomainError("ridge and solve_tol must be positive")
        SolveMethod(self.solve_method)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class GuidanceStep:
    """Quantities produced at one timestep.

    Attributes:
        predicted_noise: eps from the denoiser
        x0_pred: Tweedie estimate from the predicted noise
        likelihood_score: Guidance gradient with respect to x_t
        refined_noise: eps_hat after refinement
        x0_refined: Tweedie estimate from the refined noise
    """
    predicted_noise: np.ndarray
    x0_pred: np.ndarray
    likelihood_score: np.ndarray
    refined_noise: np.ndarray
    x0_refined: np.ndarray


def tweedie_x0(schedule: DiffusionSchedule, x_t: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    """x0|t = (x_t - sqrt(1 - ab) * eps) / sqrt(ab); t = 0 returns x_t."""
    ab = schedule.alpha_bar(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise DomainError(f"x_t shape {x_t.shape} != eps shape {eps.shape}")
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def kernel_scale(schedule: DiffusionSchedule, t: int) -> float:
    """c = (1 - ab)/ab, the A A^T weight of the likelihood covariance."""
    schedule.check_timestep(t)
    ab = schedule.alpha_bar(t)
    return (1.0 - ab) / ab


def needs_ridge(op: LinearOperator, cfg: GuidanceConfig, svd: bool = False) -> bool:
    """True when sigma_y = 0 and the kernel solve would be iterative."""
    return cfg.sigma_y == 0 and not (svd or op.exact_kernel_solve)


def _sigma2(op: LinearOperator, cfg: GuidanceConfig, svd: bool = False) -> float:
    if needs_ridge(op, cfg, svd):
        logger.debug(f"sigma_y = 0 on {op.kind}: using ridge {cfg.ridge:g}")
        return cfg.ridge
    return cfg.sigma_y ** 2


def likelihood_score(
    op: LinearOperator,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig,
    x0_pred: np.ndarray,
    y: np.ndarray,
    t: int,
) -> np.ndarray:
    """
    Closed-form likelihood score through the kernel solve.

    Args:
        op: Degradation operator
        schedule: Diffusion schedule
        cfg: Guidance config (sigma_y, solve method)
        x0_pred: Estimate of x0 at timestep t
        y: Measurement
        t: Timestep in [1, T]

    Returns:
        (1/sqrt(ab)) A^T (c A A^T + sigma2 I)^-1 (y - A x0_pred)

    Raises:
        SingularSystemError, ConvergenceError: From the kernel solve
    """
    c = kernel_scale(schedule, t)
    ab = schedule.alpha_bar(t)
    residual = np.asarray(y, dtype=np.float64) - op.apply(x0_pred)
    v = op.kernel_solve(c, _sigma2(op, cfg), residual, method=cfg.solve_method, tol=cfg.solve_tol)
    return op.adjoint(v) / np.sqrt(ab)


def likelihood_score_svd(
    factors: SvdFactors,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig,
    x0_pred: np.ndarray,
    y: np.ndarray,
    t: int,
) -> np.ndarray:
    """
    Likelihood score through SVD factors.

    V diag(s / (c s^2 + sigma_y^2)) U^H (y - A x0_pred) / sqrt(ab); entries
    with a zero denominator contribute nothing.
    """
    c = kernel_scale(schedule, t)
    ab = schedule.alpha_bar(t)
    x0_pred = np.asarray(x0_pred, dtype=np.float64)
    residual = np.asarray(y, dtype=np.float64).reshape(-1) - factors.reconstruct(x0_pred).reshape(-1)

    s = factors.singular_values
    denom = c * s ** 2 + cfg.sigma_y ** 2
    gain = np.divide(s, denom, out=np.zeros_like(s), where=denom > 0)

    projected = factors.u_adjoint(residual)
    spectral = np.zeros(x0_pred.size, dtype=np.result_type(projected, np.float64))
    spectral[: s.size] = gain * projected
    return np.real(factors.v_apply(spectral)).reshape(x0_pred.shape) / np.sqrt(ab)


def jacobian_factor(schedule: DiffusionSchedule, jac: np.ndarray, t: int) -> np.ndarray:
    """Diagonal of (I - sqrt(1 - ab) * d eps/d x_t)."""
    ab = schedule.alpha_bar(t)
    return 1.0 - np.sqrt(1.0 - ab) * np.asarray(jac, dtype=np.float64)


def likelihood_score_with_jacobian(
    op: LinearOperator,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig,
    x0_pred: np.ndarray,
    jac: np.ndarray,
    y: np.ndarray,
    t: int,
    factors: Optional[SvdFactors] = None,
) -> np.ndarray:
    """Frozen-noise score scaled elementwise by (1 - sqrt(1 - ab) * jac)."""
    if factors is not None:
        base = likelihood_score_svd(factors, schedule, cfg, x0_pred, y, t)
    else:
        base = likelihood_score(op, schedule, cfg, x0_pred, y, t)
    return base * jacobian_factor(schedule, jac, t)


def refine_noise(
    cfg: GuidanceConfig, schedule: DiffusionSchedule, eps: np.ndarray, score: np.ndarray, t: int
) -> np.ndarray:
    """eps_hat = eps - mu * sqrt(1 - ab) * score."""
    ab = schedule.alpha_bar(t)
    eps = np.asarray(eps, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    if eps.shape != score.shape:
        raise DomainError(f"eps shape {eps.shape} != score shape {score.shape}")
    return eps - cfg.mu * np.sqrt(1.0 - ab) * score


def score_from_noise(schedule: DiffusionSchedule, eps: np.ndarray, t: int) -> np.ndarray:
    """Marginal score -eps / sqrt(1 - ab)."""
    schedule.check_timestep(t)
    return -np.asarray(eps, dtype=np.float64) / np.sqrt(1.0 - schedule.alpha_bar(t))


def noise_from_score(schedule: DiffusionSchedule, score: np.ndarray, t: int) -> np.ndarray:
    """Inverse of score_from_noise."""
    schedule.check_timestep(t)
    return -np.sqrt(1.0 - schedule.alpha_bar(t)) * np.asarray(score, dtype=np.float64)


def guidance_step(
    op: LinearOperator,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig,
    denoiser: Denoiser,
    x_t: np.ndarray,
    y: np.ndarray,
    t: int,
    factors: Optional[SvdFactors] = None,
) -> GuidanceStep:
    """
    Predict, score and refine at one timestep.

    With mean correction off the score is taken at x_t/sqrt(ab), which does
    not depend on the predicted noise, so the Jacobian term has nothing to
    correct and is skipped.

    Raises:
        CapabilityError: If jacobian_term is set and the denoiser has no Jacobian
    """
    if cfg.jacobian_term and not denoiser.has_exact_jacobian:
        raise CapabilityError("jacobian_term needs a denoiser with an exact Jacobian")

    ab = schedule.alpha_bar(t)
    eps = denoiser.predict_noise(x_t, t)
    x0_pred = tweedie_x0(schedule, x_t, eps, t)
    anchor = x0_pred if cfg.mean_correction else np.asarray(x_t) / np.sqrt(ab)

    if factors is not None:
        score = likelihood_score_svd(factors, schedule, cfg, anchor, y, t)
    else:
        score = likelihood_score(op, schedule, cfg, anchor, y, t)
    if cfg.jacobian_term and cfg.mean_correction:
        score = score * jacobian_factor(schedule, denoiser.noise_jacobian(t), t)

    refined = refine_noise(cfg, schedule, eps, score, t)
    return GuidanceStep(
        predicted_noise=eps,
        x0_pred=x0_pred,
        likelihood_score=score,
        refined_noise=refined,
        x0_refined=tweedie_x0(schedule, x_t, refined, t),
    )
