"""
Oracle verification suites.

Each suite checks one property of the implementation against a closed-form
or Monte-Carlo reference in the Gaussian lab and returns a SuiteResult.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import lab
from .denoiser import AnalyticDenoiser, GaussianPrior
from .errors import DomainError
from .guidance import GuidanceConfig, likelihood_score, likelihood_score_svd
from .io import make_rng
from .linops import LinearOperator, build_operator
from .metrics import psnr
from .samplers import RunSpec, SamplerKind, sample
from .schedule import linear_schedule, uniform_timestep_plan


logger = logging.getLogger(__name__)

FD_TOLERANCE = 1e-5
PATH_TOLERANCE = 1e-8
JACOBIAN_TOLERANCE = 1e-6
Z_LIMIT = 3.0

# Small diagonal motion kernel stored by value so the suite needs no file.
_MOTION_KERNEL = [
    [0.0, 0.0, 0.0, 0.1, 0.2],
    [0.0, 0.0, 0.1, 0.3, 0.1],
    [0.0, 0.1, 0.4, 0.1, 0.0],
    [0.1, 0.3, 0.1, 0.0, 0.0],
    [0.2, 0.1, 0.0, 0.0, 0.0],
]


@dataclass
class CheckResult:
    """Outcome of one check inside a suite."""
    name: str
    passed: bool
    value: float = float("nan")
    threshold: Optional[float] = None
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("value", "threshold"):
            if isinstance(data[key], float) and not math.isfinite(data[key]):
                data[key] = str(data[key])
        return data


@dataclass
class SuiteResult:
    """Outcome of a verification suite."""
    name: str
    checks: List[CheckResult] = field(default_factory=list)
    duration: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, value: float = float("nan"),
            threshold: Optional[float] = None, detail: str = "") -> CheckResult:
        check = CheckResult(name, bool(passed), float(value), threshold, detail)
        self.checks.append(check)
        return check

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "duration": self.duration,
            "checks": [c.to_dict() for c in self.checks],
        }


def _lab_operators(shape: Tuple[int, int, int]) -> List[LinearOperator]:
    """The shipped operator family at lab size (blocks shrink to fit 16x16 images)."""
    descriptors: List[Union[str, Dict[str, Any]]] = [
        "identity",
        "mask:keep=0.5,seed=3",
        "cs:ratio=0.05,block=8,seed=1",
        "cs:ratio=0.1,block=8,seed=1",
        "cs:ratio=0.25,block=8,seed=1",
        "gaussian_blur:size=5,std=10",
        {"kind": "motion_blur", "params": {"kernel_values": _MOTION_KERNEL}},
        "avgpool:factor=4",
    ]
    return [build_operator(d, shape) for d in descriptors]


def fd_gradient(seed: int = 0) -> SuiteResult:
    """Guidance score against finite differences of the frozen-noise log-density."""
    result = SuiteResult("fd_gradient")
    shape = (16, 16, 1)
    schedule = linear_schedule(100)
    sigma_y = 0.05
    rng = make_rng(seed)
    for op in _lab_operators(shape):
        x_true = 0.5 + 0.1 * rng.standard_normal(shape)
        y = op.apply(x_true) + sigma_y * rng.standard_normal(op.output_shape)
        for t in (1, schedule.num_steps // 2, schedule.num_steps):
            ab = schedule.alpha_bar(t)
            eps = rng.standard_normal(shape)
            x_t = np.sqrt(ab) * x_true + np.sqrt(1.0 - ab) * eps
            err = lab.frozen_noise_score_check(op, schedule, x_t, eps, y, t, sigma_y)
            result.add(f"{op.kind}[{op.descriptor.format()}] t={t}", err <= FD_TOLERANCE,
                       err, FD_TOLERANCE)
    return result


def _dense_score(A: np.ndarray, schedule, sigma_y: float, x0: np.ndarray, y: np.ndarray,
                 t: int) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    c = (1.0 - ab) / ab
    r = np.asarray(y).ravel() - A @ x0.ravel()
    v = np.linalg.solve(c * A @ A.T + sigma_y ** 2 * np.eye(A.shape[0]), r)
    return (A.T @ v).reshape(x0.shape) / np.sqrt(ab)


def svd_equivalence(seed: int = 0, trials: int = 20) -> SuiteResult:
    """SVD, closed-form, conjugate-gradient and dense score paths agree."""
    result = SuiteResult("svd_equivalence")
    shape = (16, 16, 1)
    schedule = linear_schedule(100)
    sigma_y = 0.05
    rng = make_rng(seed)
    operators = [op for op in _lab_operators(shape) if op.has_svd]
    operators.append(build_operator("dense:rows=64,seed=5", shape))

    for op in operators:
        factors = op.svd_factors()
        A = op.to_dense()
        worst = 0.0
        for _ in range(trials):
            t = int(rng.integers(1, schedule.num_steps + 1))
            x0 = rng.standard_normal(shape)
            noise = sigma_y * rng.standard_normal(op.output_shape)
            y = op.apply(rng.standard_normal(shape)) + noise
            cfg = GuidanceConfig(sigma_y=sigma_y, solve_tol=1e-12)
            dense = _dense_score(A, schedule, sigma_y, x0, y, t)
            paths = [
                likelihood_score_svd(factors, schedule, cfg, x0, y, t),
                likelihood_score(op, schedule, replace(cfg, solve_method="iterative"), x0, y, t),
            ]
            if op.exact_kernel_solve:
                paths.append(likelihood_score(op, schedule, replace(cfg, solve_method="direct"),
                                              x0, y, t))
            worst = max([worst] + [lab.relative_error(p, dense) for p in paths])
        result.add(f"{op.kind}[{op.descriptor.format()}]", worst <= PATH_TOLERANCE,
                   worst, PATH_TOLERANCE)
    return result


def jacobian_assumption(seed: int = 0) -> SuiteResult:
    """
    Jacobian-corrected score against the exact fixed-covariance gradient, and
    the size of the error made without the Jacobian term as c0 grows.
    """
    result = SuiteResult("jacobian_assumption")
    shape = (8, 8, 1)
    schedule = linear_schedule(100)
    op = build_operator("cs:ratio=0.25,block=8,seed=2", shape)
    variances = (0.01, 1.0, 100.0)
    for t in (10, 50, 100):
        deviations = lab.sweep_prior_variance(op, schedule, shape, variances, t, 0.05,
                                              make_rng(seed + t))
        for d in deviations:
            result.add(f"corrected t={t} c0={d.prior_variance:g}",
                       d.corrected_error <= JACOBIAN_TOLERANCE, d.corrected_error,
                       JACOBIAN_TOLERANCE)
            logger.info(f"t={t} c0={d.prior_variance:g}: "
                        f"without Jacobian {d.uncorrected_error:.4g}, "
                        f"fixed vs exact covariance {d.exact_covariance_gap:.4g}")
        errors = [d.uncorrected_error for d in deviations]
        decreasing = errors[0] > 0 and all(a > b for a, b in zip(errors, errors[1:]))
        result.add(f"uncorrected decreasing in c0 t={t}", decreasing, errors[-1],
                   detail=", ".join(f"c0={v:g}: {e:.4g}" for v, e in zip(variances, errors)))
    return result


def gaussian_marginal(seed: int = 0, draws: int = 100_000, tuples: int = 5) -> SuiteResult:
    """Composed Gaussian draws match N(alpha z0, alpha^2 V1 + V2)."""
    result = SuiteResult("gaussian_marginal")
    rng = make_rng(seed)
    for i in range(tuples):
        alpha = float(rng.uniform(0.1, 2.0))
        v1 = float(rng.uniform(0.01, 1.0))
        v2 = float(rng.uniform(0.01, 1.0))
        z0 = float(rng.uniform(-1.0, 1.0))
        samples = lab.compose_gaussian_marginal(alpha, v1, v2, z0, draws, rng)
        z_mean, z_var = lab.moment_z_scores(samples, alpha * z0, alpha ** 2 * v1 + v2)
        label = f"alpha={alpha:.3f} V1={v1:.3f} V2={v2:.3f} z0={z0:.3f}"
        result.add(f"mean #{i}", abs(z_mean) <= Z_LIMIT, z_mean, Z_LIMIT, label)
        result.add(f"variance #{i}", abs(z_var) <= Z_LIMIT, z_var, Z_LIMIT, label)
    return result


def mmse_optimality(seed: int = 0, draws: int = 100_000) -> SuiteResult:
    """
    The analytic noise predictor has lower squared error than the same
    predictor shifted along a fixed random direction.
    """
    result = SuiteResult("mmse_optimality")
    schedule = linear_schedule(100)
    prior = GaussianPrior.isotropic((16, 16, 1), 0.5, 0.01)
    excess = lab.mmse_comparison(prior, schedule, t=50, n=draws, rng=make_rng(seed))
    for name, (mean, se) in excess.items():
        ratio = mean / se if se > 0 else math.inf
        result.add(name, ratio > Z_LIMIT, ratio, Z_LIMIT, f"excess MSE {mean:.4g} +/- {se:.2g}")
    return result


def _lab_spec(op: LinearOperator, prior: GaussianPrior, y: np.ndarray, kind: SamplerKind,
              seed: int, T: int = 100, steps: int = 100, **guidance: Any) -> RunSpec:
    schedule = linear_schedule(T)
    return RunSpec(
        schedule=schedule,
        plan=uniform_timestep_plan(schedule, steps),
        denoiser=AnalyticDenoiser(prior, schedule),
        kind=kind,
        operator=op,
        y=y,
        guidance=GuidanceConfig(**guidance),
        seed=seed,
    )


def posterior_recovery(seed: int = 0, seeds: int = 10) -> SuiteResult:
    """
    id_nrlg inverts a square orthogonal operator exactly, and on a 50% CS
    problem lands closer to the exact posterior mean than the lifted baseline.
    """
    result = SuiteResult("posterior_recovery")

    shape = (32, 32, 1)
    prior = GaussianPrior.isotropic(shape, 0.5, 0.01)
    op = build_operator(f"cs:ratio=1.0,block=8,seed={seed}", shape)
    x_true = np.clip(prior.sample(make_rng(seed)), 0.0, 1.0)
    y = op.apply(x_true)
    target = op.adjoint(y)
    out = sample(_lab_spec(op, prior, y, SamplerKind.ID_NRLG, seed, mu=1.0, sigma_y=0.0)).x0
    err = lab.relative_error(out, target)
    result.add("orthogonal inversion rel err", err <= 1e-3, err, 1e-3)
    quality = psnr(out, target)
    result.add("orthogonal inversion PSNR", quality >= 50.0, quality, 50.0)

    shape = (16, 16, 1)
    prior = GaussianPrior.isotropic(shape, 0.5, 0.01)
    sigma_y = 0.05
    wins = 0
    for k in range(seeds):
        op = build_operator(f"cs:ratio=0.5,block=8,seed={seed + k}", shape)
        rng = make_rng(seed + 1000 + k)
        x_true = prior.sample(rng)
        y = op.apply(x_true) + sigma_y * rng.standard_normal(op.output_shape)
        post = lab.exact_posterior(op, prior, y, sigma_y).mean
        baseline = lab.lifted_baseline(op, prior, y)
        out = sample(_lab_spec(op, prior, y, SamplerKind.ID_NRLG, seed + k, mu=1.0,
                               sigma_y=sigma_y)).x0
        ours, theirs = float(np.linalg.norm(out - post)), float(np.linalg.norm(baseline - post))
        wins += ours < theirs
        logger.debug(f"posterior proximity seed {seed + k}: {ours:.4g} vs baseline {theirs:.4g}")
    result.add("closer to posterior mean than lifted baseline", wins == seeds, wins, seeds,
               f"{wins}/{seeds} seeds")
    return result


def determinism(seed: int = 0) -> SuiteResult:
    """Identical RunSpecs reproduce bit-identical trajectories."""
    result = SuiteResult("determinism")
    shape = (8, 8, 1)
    prior = GaussianPrior.isotropic(shape, 0.5, 0.05)
    op = build_operator("cs:ratio=0.5,block=8,seed=4", shape)
    rng = make_rng(seed)
    y = op.apply(prior.sample(rng)) + 0.05 * rng.standard_normal(op.output_shape)

    for kind in SamplerKind:
        spec = _lab_spec(op, prior, y, kind, seed, steps=20, mu=1.0, zeta=0.5, sigma_y=0.05)
        spec = replace(spec, rho=0.1)
        first, second = sample(spec), sample(spec)
        same = (np.array_equal(first.x0, second.x0)
                and np.array_equal(first.residuals, second.residuals, equal_nan=True))
        result.add(kind.value, same, 0.0 if same else 1.0)

    spec = _lab_spec(op, prior, y, SamplerKind.DD_NRLG, seed, steps=20, mu=1.0, zeta=0.0,
                     sigma_y=0.05)
    base = sample(spec).x0
    reseeded = sample(replace(spec, step_seed=seed + 12345)).x0
    same = np.array_equal(base, reseeded)
    result.add("dd_nrlg zeta=0 ignores step reseeding", same, 0.0 if same else 1.0)
    return result


def ablation_direction(seed: int = 0, seeds: int = 10) -> SuiteResult:
    """Noise refinement ends closer to y than direct sample adjustment."""
    result = SuiteResult("ablation_direction")
    shape = (16, 16, 1)
    prior = GaussianPrior.isotropic(shape, 0.5, 1.0)
    op = build_operator("identity", shape)
    wins = 0
    for k in range(seeds):
        x_true = np.clip(prior.sample(make_rng(seed + 500 + k)), 0.0, 1.0)
        y = op.apply(x_true)
        refined = sample(_lab_spec(op, prior, y, SamplerKind.DD_NRLG, seed + k, mu=0.9, zeta=1.0))
        direct = sample(_lab_spec(op, prior, y, SamplerKind.DIRECT_ADJUST, seed + k, mu=0.9))
        ours = float(np.linalg.norm(y - refined.x0))
        theirs = float(np.linalg.norm(y - direct.x0))
        wins += ours <= theirs
        logger.debug(f"ablation seed {seed + k}: dd_nrlg {ours:.4g}, direct_adjust {theirs:.4g}")
    result.add("dd_nrlg residual <= direct_adjust", wins >= 8, wins, 8, f"{wins}/{seeds} seeds")
    return result


def unguided_sanity(seed: int = 0, samples: int = 10_000) -> SuiteResult:
    """
    Unguided DDPM reproduces the lab prior; DDIM with zeta = 0 is deterministic.

    Every pixel of the analytic lab is an independent chain, so one run over
    a ``samples``-pixel image yields that many independent draws.
    """
    result = SuiteResult("unguided_sanity")
    side = int(math.isqrt(samples))
    shape = (side, side)
    n = side * side

    for mean, var in ((0.5, 0.01), (0.5, 1.0)):
        prior = GaussianPrior.isotropic(shape, mean, var)
        schedule = linear_schedule(1000)
        spec = RunSpec(schedule=schedule, plan=uniform_timestep_plan(schedule, 1000),
                       denoiser=AnalyticDenoiser(prior, schedule), kind=SamplerKind.DDPM_UNCOND,
                       seed=seed)
        draws = sample(spec).x0.ravel()
        z_mean, z_var = lab.moment_z_scores(draws, mean, var)
        result.add(f"ddpm mean N({mean}, {var})", abs(z_mean) <= Z_LIMIT, z_mean, Z_LIMIT)
        result.add(f"ddpm variance N({mean}, {var})", abs(z_var) <= Z_LIMIT, z_var, Z_LIMIT)
        logger.debug(f"ddpm N({mean}, {var}) over {n} chains: "
                     f"mean z {z_mean:.3f}, var z {z_var:.3f}")

    prior = GaussianPrior.isotropic((8, 8), 0.5, 0.01)
    schedule = linear_schedule(100)
    spec = RunSpec(schedule=schedule, plan=uniform_timestep_plan(schedule, 50),
                   denoiser=AnalyticDenoiser(prior, schedule), kind=SamplerKind.DDIM_UNCOND,
                   guidance=GuidanceConfig(zeta=0.0), seed=seed)
    same = np.array_equal(sample(spec).x0, sample(replace(spec, step_seed=seed + 1)).x0)
    result.add("ddim zeta=0 deterministic", same, 0.0 if same else 1.0)
    return result


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "fd_gradient": fd_gradient,
    "svd_equivalence": svd_equivalence,
    "jacobian_assumption": jacobian_assumption,
    "gaussian_marginal": gaussian_marginal,
    "mmse_optimality": mmse_optimality,
    "posterior_recovery": posterior_recovery,
    "determinism": determinism,
    "ablation_direction": ablation_direction,
    "unguided_sanity": unguided_sanity,
}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    """Run one suite by name, timing it."""
    if name not in SUITES:
        raise DomainError(f"unknown suite '{name}'; choose from {sorted(SUITES)}")
    logger.info(f"Running suite {name}")
    start = time.perf_counter()
    result = SUITES[name](seed=seed)
    result.duration = time.perf_counter() - start
    logger.info(f"Suite {name}: {'PASS' if result.passed else 'FAIL'} in {result.duration:.1f}s")
    return result


def run_suites(names: Optional[Sequence[str]] = None, seed: int = 0) -> List[SuiteResult]:
    """Run the named suites (all when None) in registry order."""
    selected = list(SUITES) if not names else list(names)
    for name in selected:
        if name not in SUITES:
            raise DomainError(f"unknown suite '{name}'; choose from {sorted(SUITES)}")
    return [run_suite(name, seed) for name in selected]


def write_report(path: Union[str, Path], results: Sequence[SuiteResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    path.write_text(json.dumps(payload, indent=2))
    return path
