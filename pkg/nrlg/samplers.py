"""
Restoration and reference sampling loops.

Samplers:
- dd_nrlg: guided DDIM-style sampling; the predicted noise is refined by the
  likelihood score and the update mixes in fresh noise with weight zeta.
- id_nrlg: iterative denoising; x_{t-1} = sqrt(ab_prev) * x0_refined.
- ddim_uncond / ddpm_uncond: unguided references.
- dps: DDPM steps followed by a gradient step on ||y - A x0|t||^2.
- direct_adjust: DDPM steps with the likelihood score added in sample space.

Every stochastic draw comes from two PCG64 streams spawned from the run
seed: one for the initial x_T, one for the per-step noise.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .denoiser import AnalyticDenoiser, Denoiser
from .errors import CapabilityError, DomainError, NonFiniteError
from .guidance import (
    GuidanceConfig,
    guidance_step,
    needs_ridge,
    tweedie_x0,
)
from .io import split_streams
from .linops import LinearOperator, SvdFactors
from .schedule import DiffusionSchedule, TimestepPlan


logger = logging.getLogger(__name__)


class SamplerKind(Enum):
    """Available sampling loops."""
    DD_NRLG = "dd_nrlg"
    ID_NRLG = "id_nrlg"
    DDIM_UNCOND = "ddim_uncond"
    DDPM_UNCOND = "ddpm_uncond"
    DPS = "dps"
    DIRECT_ADJUST = "direct_adjust"

    @property
    def guided(self) -> bool:
        return self not in (SamplerKind.DDIM_UNCOND, SamplerKind.DDPM_UNCOND)


class SamplingStage(Enum):
    """Stages of a sampling run."""
    INITIALIZING = "initializing"
    SAMPLING = "sampling"
    COMPLETE = "complete"


@dataclass
class SamplingProgress:
    """Structured progress event for sampling runs.

    Fields:
        stage: Current stage
        step: Zero-based step index
        total_steps: Number of steps in the plan
        t: Current timestep (0 once complete)
        residual: ||y - A x0|| of the step, when a measurement is present
    """
    stage: SamplingStage
    step: int = 0
    total_steps: int = 0
    t: int = 0
    residual: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage.value,
            "step": self.step,
            "total_steps": self.total_steps,
            "t": self.t,
            "residual": self.residual,
        }


ProgressCallback = Callable[[SamplingProgress], None]


@dataclass
class RunSpec:
    """Everything a sampling run depends on.

    Attributes:
        schedule: Diffusion schedule
        plan: Timestep plan
        denoiser: Noise predictor
        kind: Sampler to run
        operator: Degradation operator (guided samplers)
        y: Measurement (guided samplers)
        guidance: Guidance config; zeta also drives ddim_uncond
        seed: Unsigned 64-bit run seed
        step_seed: Replaces the per-step stream seed, keeping the initial draw
        rho: DPS step size
        snapshot_stride: Record (x_t, x0) every this many steps; 0 disables
        value_range: Output clamp range
        x_init: Explicit x_T instead of a seeded draw
    """
    schedule: DiffusionSchedule
    plan: TimestepPlan
    denoiser: Denoiser
    kind: SamplerKind = SamplerKind.DD_NRLG
    operator: Optional[LinearOperator] = None
    y: Optional[np.ndarray] = None
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    step_seed: Optional[int] = None
    rho: float = 1.0
    snapshot_stride: int = 0
    value_range: Tuple[float, float] = (0.0, 1.0)
    x_init: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kind = SamplerKind(self.kind)
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.snapshot_stride < 0:
            raise DomainError("snapshot_stride must be >= 0")
        if self.rho < 0:
            raise DomainError(f"rho must be >= 0, got {self.rho}")
        if self.plan.timesteps and self.plan.timesteps[0] > self.schedule.num_steps:
            raise DomainError("plan starts beyond the schedule length")


@dataclass
class Snapshot:
    """State recorded at one step."""
    step: int
    t: int
    x_t: np.ndarray
    x0: np.ndarray


@dataclass
class StepRecord:
    """Per-step log entry.

    Attributes:
        step: Zero-based step index
        t: Timestep of the step
        t_prev: Timestep the step moves to
        residual: ||y - A x0_hat|| (NaN without a measurement)
        noise_sumsq: Sum of squares of the fresh noise drawn this step
        noise_count: Number of fresh noise values drawn this step
    """
    step: int
    t: int
    t_prev: int
    residual: float
    noise_sumsq: float = 0.0
    noise_count: int = 0


@dataclass
class Trajectory:
    """Result of a sampling run; ``x0`` is unclamped."""
    x0: np.ndarray
    kind: SamplerKind
    seed: int
    records: List[StepRecord] = field(default_factory=list)
    snapshots: List[Snapshot] = field(default_factory=list)
    value_range: Tuple[float, float] = (0.0, 1.0)

    @property
    def residuals(self) -> np.ndarray:
        return np.array([r.residual for r in self.records])

    @property
    def final_residual(self) -> float:
        return self.records[-1].residual if self.records else float("nan")

    def clamped(self) -> np.ndarray:
        """Final image clamped to the value range."""
        return np.clip(self.x0, *self.value_range)


def ddpm_step(
    schedule: DiffusionSchedule,
    x_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    t_prev: int,
    z: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Ancestral DDPM step from t to t_prev (strides allowed).

    With a = ab_t/ab_prev and b = 1 - a: mean = (x_t - b/sqrt(1-ab_t) eps)/sqrt(a),
    plus sqrt(b) * z when z is given.
    """
    ab = schedule.alpha_bar(t)
    a = ab / schedule.alpha_bar(t_prev)
    b = 1.0 - a
    mean = (x_t - b / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
    if z is None:
        return mean
    return mean + math.sqrt(b) * z


def dps_gradient(
    op: LinearOperator,
    schedule: DiffusionSchedule,
    denoiser: Denoiser,
    x_t: np.ndarray,
    y: np.ndarray,
    t: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradient of ||y - A x0|t(x_t)||^2 with respect to x_t.

    Uses the chain rule through the denoiser's diagonal Jacobian:
    d x0/d x_t = (1 - sqrt(1-ab) * jac) / sqrt(ab).

    Returns:
        (gradient, x0_pred, predicted noise)

    Raises:
        CapabilityError: If the denoiser has no exact Jacobian
    """
    if not denoiser.has_exact_jacobian:
        raise CapabilityError("dps needs a denoiser with an exact Jacobian")
    ab = schedule.alpha_bar(t)
    eps = denoiser.predict_noise(x_t, t)
    x0 = tweedie_x0(schedule, x_t, eps, t)
    back = op.adjoint(np.asarray(y) - op.apply(x0))
    chain = (1.0 - math.sqrt(1.0 - ab) * denoiser.noise_jacobian(t)) / math.sqrt(ab)
    return -2.0 * chain * back, x0, eps


def _last_good(step: int, x: np.ndarray, x0: np.ndarray) -> Dict[str, Any]:
    return {"step": step - 1, "x_t": x.copy(), "x0": x0.copy()}


class _Sampler:
    """Shared loop state for one run."""

    def __init__(self, spec: RunSpec, progress_callback: Optional[ProgressCallback]):
        self.spec = spec
        self.progress_callback = progress_callback
        self.shape = tuple(spec.denoiser.shape)
        self.init_rng, self.step_rng = split_streams(spec.seed, spec.step_seed)
        self.factors: Optional[SvdFactors] = None

        kind = spec.kind
        if kind.guided:
            if spec.operator is None or spec.y is None:
                raise DomainError(f"{kind.value} needs an operator and a measurement")
            if spec.operator.input_shape != self.shape:
                raise DomainError(
                    f"operator input {spec.operator.input_shape} != denoiser shape {self.shape}"
                )
        if kind is SamplerKind.DPS and not spec.denoiser.has_exact_jacobian:
            raise CapabilityError("dps needs a denoiser with an exact Jacobian")

        op, cfg = spec.operator, spec.guidance
        if kind.guided and cfg.use_svd and op.has_svd and kind is not SamplerKind.DPS:
            self.factors = op.svd_factors()
        if kind.guided and needs_ridge(op, cfg, svd=self.factors is not None):
            logger.warning(f"sigma_y = 0 with an iterative kernel solve on {op.kind}; "
                           f"adding ridge sigma_y^2 = {cfg.ridge:g}")

    def emit(self, stage: SamplingStage, step: int = 0, t: int = 0,
             residual: Optional[float] = None) -> None:
        if self.progress_callback:
            self.progress_callback(SamplingProgress(stage, step, len(self.spec.plan), t, residual))

    def residual(self, x0: np.ndarray) -> float:
        spec = self.spec
        if spec.operator is None or spec.y is None:
            return float("nan")
        return float(np.linalg.norm(np.asarray(spec.y) - spec.operator.apply(x0)))

    def initial_state(self) -> np.ndarray:
        spec = self.spec
        if spec.x_init is not None:
            x = np.array(spec.x_init, dtype=np.float64)
            if x.shape != self.shape:
                raise DomainError(f"x_init shape {x.shape} != {self.shape}")
            return x
        if isinstance(spec.denoiser, AnalyticDenoiser):
            T = spec.plan.timesteps[0]
            ab = spec.schedule.alpha_bar(T)
            prior = spec.denoiser.prior
            logger.info(
                f"x_T ~ N(0, I) while the lab marginal at t={T} has mean in "
                f"[{math.sqrt(ab) * prior.mean.min():.4g}, {math.sqrt(ab) * prior.mean.max():.4g}] "
                f"and variance in [{ab * prior.variance.min() + 1 - ab:.4g}, "
                f"{ab * prior.variance.max() + 1 - ab:.4g}]"
            )
        return self.init_rng.standard_normal(self.shape)

    def fresh_noise(self) -> np.ndarray:
        return self.step_rng.standard_normal(self.shape)

    def run(self) -> Trajectory:
        spec = self.spec
        self.emit(SamplingStage.INITIALIZING)
        x = self.initial_state()
        trajectory = Trajectory(x0=x, kind=spec.kind, seed=int(spec.seed),
                                value_range=spec.value_range)
        last_x0 = x

        for step, (t, t_prev) in enumerate(spec.plan):
            try:
                x_prev, x0_hat, noise = self.step(x, t, t_prev)
            except NonFiniteError as e:
                if e.step is not None:
                    raise
                logger.error(f"Non-finite denoiser output at step {step} (t={t}); "
                             f"aborting {spec.kind.value}")
                raise NonFiniteError(e.reason, step=step, t=t,
                                     last_good=_last_good(step, x, last_x0)) from e
            if not (np.all(np.isfinite(x_prev)) and np.all(np.isfinite(x0_hat))):
                logger.error(f"Non-finite state at step {step} (t={t}); aborting {spec.kind.value}")
                raise NonFiniteError(
                    f"{spec.kind.value} produced non-finite values",
                    step=step,
                    t=t,
                    last_good=_last_good(step, x, last_x0),
                )

            record = StepRecord(step=step, t=t, t_prev=t_prev, residual=self.residual(x0_hat))
            if noise is not None:
                record.noise_sumsq = float(np.sum(noise ** 2))
                record.noise_count = int(noise.size)
            trajectory.records.append(record)
            if spec.snapshot_stride and step % spec.snapshot_stride == 0:
                trajectory.snapshots.append(Snapshot(step, t, x.copy(), x0_hat.copy()))

            self.emit(SamplingStage.SAMPLING, step, t, record.residual)
            x, last_x0 = x_prev, x0_hat

        trajectory.x0 = x
        self.emit(SamplingStage.COMPLETE, len(spec.plan), 0, trajectory.final_residual)
        return trajectory

    def step(self, x: np.ndarray, t: int, t_prev: int):
        """Return (x_{t_prev}, x0 estimate, fresh noise or None)."""
        spec = self.spec
        schedule, cfg, kind = spec.schedule, spec.guidance, spec.kind
        ab_prev = schedule.alpha_bar(t_prev)

        if kind in (SamplerKind.DD_NRLG, SamplerKind.ID_NRLG):
            gs = guidance_step(spec.operator, schedule, cfg, spec.denoiser, x, spec.y, t, self.factors)
            if kind is SamplerKind.ID_NRLG:
                return math.sqrt(ab_prev) * gs.x0_refined, gs.x0_refined, None
            direction, noise = self.mix_noise(gs.refined_noise, cfg.zeta)
            x_prev = math.sqrt(ab_prev) * gs.x0_refined + math.sqrt(1.0 - ab_prev) * direction
            return x_prev, gs.x0_refined, noise

        if kind is SamplerKind.DDIM_UNCOND:
            eps = spec.denoiser.predict_noise(x, t)
            x0 = tweedie_x0(schedule, x, eps, t)
            direction, noise = self.mix_noise(eps, cfg.zeta)
            return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * direction, x0, noise

        if kind is SamplerKind.DPS:
            grad, x0, eps = dps_gradient(spec.operator, schedule, spec.denoiser, x, spec.y, t)
            noise = self.fresh_noise() if t_prev > 0 else None
            return ddpm_step(schedule, x, eps, t, t_prev, noise) - spec.rho * grad, x0, noise

        if kind is SamplerKind.DIRECT_ADJUST:
            gs = guidance_step(spec.operator, schedule, cfg, spec.denoiser, x, spec.y, t, self.factors)
            noise = self.fresh_noise() if t_prev > 0 else None
            ab = schedule.alpha_bar(t)
            x_prev = ddpm_step(schedule, x, gs.predicted_noise, t, t_prev, noise)
            x_prev = x_prev + cfg.mu * (1.0 - ab) / math.sqrt(ab) * gs.likelihood_score
            return x_prev, gs.x0_pred, noise

        eps = spec.denoiser.predict_noise(x, t)
        x0 = tweedie_x0(schedule, x, eps, t)
        noise = self.fresh_noise() if t_prev > 0 else None
        return ddpm_step(schedule, x, eps, t, t_prev, noise), x0, noise

    def mix_noise(self, eps: np.ndarray, zeta: float):
        """sqrt(1 - zeta) * eps + sqrt(zeta) * z, drawing z only when zeta > 0."""
        if zeta == 0:
            return eps, None
        z = self.fresh_noise()
        return math.sqrt(1.0 - zeta) * eps + math.sqrt(zeta) * z, z


def sample(spec: RunSpec, progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """Run the sampler named by ``spec.kind``."""
    logger.debug(f"Sampling {spec.kind.value}: {len(spec.plan)} steps, seed={spec.seed}")
    return _Sampler(spec, progress_callback).run()


def _run_as(kind: SamplerKind, spec: RunSpec, progress_callback: Optional[ProgressCallback],
            **overrides) -> Trajectory:
    if spec.kind is not kind or overrides:
        values = dict(spec.__dict__)
        values.update(kind=kind, **overrides)
        spec = RunSpec(**values)
    return sample(spec, progress_callback)


def dd_nrlg(spec: RunSpec, progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """Guided sampling with noise refinement and zeta-mixed noise injection."""
    return _run_as(SamplerKind.DD_NRLG, spec, progress_callback)


def id_nrlg(spec: RunSpec, progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """Iterative denoising with noise refinement; no noise re-injection."""
    return _run_as(SamplerKind.ID_NRLG, spec, progress_callback)


def ddim_uncond(spec: RunSpec, progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """Unguided DDIM with the zeta noise split."""
    return _run_as(SamplerKind.DDIM_UNCOND, spec, progress_callback)


def ddpm_uncond(spec: RunSpec, progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """Unguided ancestral DDPM."""
    return _run_as(SamplerKind.DDPM_UNCOND, spec, progress_callback)


def dps_baseline(spec: RunSpec, rho: Optional[float] = None,
                 progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """DDPM steps with the exact-chain-rule DPS correction of strength rho."""
    overrides = {} if rho is None else {"rho": float(rho)}
    return _run_as(SamplerKind.DPS, spec, progress_callback, **overrides)


def direct_adjust(spec: RunSpec, progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """DDPM steps with the likelihood score added directly to the sample."""
    return _run_as(SamplerKind.DIRECT_ADJUST, spec, progress_callback)


SAMPLERS: Dict[SamplerKind, Callable[..., Trajectory]] = {
    SamplerKind.DD_NRLG: dd_nrlg,
    SamplerKind.ID_NRLG: id_nrlg,
    SamplerKind.DDIM_UNCOND: ddim_uncond,
    SamplerKind.DDPM_UNCOND: ddpm_uncond,
    SamplerKind.DPS: dps_baseline,
    SamplerKind.DIRECT_ADJUST: direct_adjust,
}
