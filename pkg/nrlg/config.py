"""
Run configuration.

A run config is flat ``key=value`` text, one entry per line, with ``#``
comment lines. Every key is optional; omitted values fall back to the
defaults below, and mu/zeta fall back to the hyperparameter presets once
the degradation operator is known.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from .errors import ConfigError, DomainError
from .guidance import GuidanceConfig
from .linops import OperatorDescriptor, SolveMethod
from .samplers import SamplerKind
from .schedule import DiffusionSchedule, TimestepPlan, linear_schedule, uniform_timestep_plan


logger = logging.getLogger(__name__)

FALLBACK_MU = 1.0
FALLBACK_ZETA = 1.0


class Preset(Enum):
    """Hyperparameter preset columns."""
    CELEBA = "celeba"
    IMAGENET = "imagenet"


class DenoiserKind(Enum):
    ANALYTIC = "analytic"
    EXTERNAL = "external"


# (family, sigma_y) -> {preset: (mu, zeta)}; missing presets use the fallback.
PRESETS: Dict[Tuple[str, float], Dict[Preset, Tuple[float, float]]] = {
    ("sr4", 0.0): {Preset.CELEBA: (1.6, 0.75), Preset.IMAGENET: (1.7, 0.7)},
    ("sr4", 0.05): {Preset.CELEBA: (1.25, 0.9), Preset.IMAGENET: (1.0, 1.0)},
    ("gaussian_deblur", 0.0): {Preset.CELEBA: (0.95, 1.0), Preset.IMAGENET: (0.95, 1.0)},
    ("gaussian_deblur", 0.05): {Preset.CELEBA: (1.0, 0.8), Preset.IMAGENET: (1.0, 1.0)},
    ("gaussian_deblur", 0.1): {Preset.CELEBA: (1.0, 0.8), Preset.IMAGENET: (1.0, 1.0)},
    ("denoise", 0.1): {Preset.CELEBA: (0.7, 1.0), Preset.IMAGENET: (0.7, 1.0)},
    ("denoise", 0.25): {Preset.CELEBA: (1.0, 1.0), Preset.IMAGENET: (0.9, 1.0)},
    ("denoise", 0.5): {Preset.CELEBA: (1.2, 1.0)},
    ("motion_deblur", 0.05): {Preset.CELEBA: (1.0, 0.8), Preset.IMAGENET: (1.0, 1.0)},
    ("motion_deblur", 0.1): {Preset.CELEBA: (1.0, 0.8)},
    ("cs5", 0.0): {Preset.CELEBA: (3.5, 1.0), Preset.IMAGENET: (2.25, 1.0)},
    ("cs10", 0.0): {Preset.CELEBA: (3.0, 1.0), Preset.IMAGENET: (2.0, 1.0)},
    ("cs25", 0.0): {Preset.CELEBA: (2.25, 1.0), Preset.IMAGENET: (1.75, 1.0)},
    ("cs5", 0.05): {Preset.CELEBA: (3.5, 1.0), Preset.IMAGENET: (3.5, 1.0)},
    ("cs10", 0.05): {Preset.CELEBA: (2.2, 1.0), Preset.IMAGENET: (2.75, 1.0)},
    ("cs25", 0.05): {Preset.CELEBA: (1.35, 1.0), Preset.IMAGENET: (1.75, 1.0)},
}

_CS_RATIOS = {0.05: "cs5", 0.1: "cs10", 0.25: "cs25"}


def degradation_family(descriptor: OperatorDescriptor) -> Optional[str]:
    """Map an operator descriptor to its preset family, if it has one."""
    kind, p = descriptor.kind, descriptor.params
    if kind == "identity":
        return "denoise"
    if kind == "gaussian_blur":
        return "gaussian_deblur"
    if kind == "motion_blur":
        return "motion_deblur"
    if kind in ("bicubic", "avgpool") and int(p.get("factor", 4)) == 4:
        return "sr4"
    if kind == "cs":
        for ratio, family in _CS_RATIOS.items():
            if math.isclose(float(p.get("ratio", -1)), ratio, rel_tol=1e-9):
                return family
    return None


def preset_values(
    descriptor: OperatorDescriptor, sigma_y: float, preset: Union[str, Preset] = Preset.CELEBA
) -> Optional[Tuple[float, float]]:
    """(mu, zeta) for the degradation, or None when the table has no entry."""
    family = degradation_family(descriptor)
    if family is None:
        return None
    preset = Preset(preset)
    for (name, sigma), columns in PRESETS.items():
        if name == family and math.isclose(sigma, sigma_y, abs_tol=1e-12):
            return columns.get(preset)
    return None


def parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("true", "yes", "on", "1"):
        return True
    if value in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings of one restore run.

    ``mu``, ``zeta`` and ``sigma_y`` stay None until ``with_presets`` fills
    them from the measurement.
    """
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler: str = SamplerKind.DD_NRLG.value
    steps: Optional[int] = None
    mu: Optional[float] = None
    zeta: Optional[float] = None
    rho: float = 1.0
    sigma_y: Optional[float] = None
    seed: int = 0
    snapshot_stride: int = 0
    mean_correction: bool = True
    jacobian_term: bool = False
    operator: Optional[str] = None
    preset: str = Preset.CELEBA.value
    denoiser: str = DenoiserKind.ANALYTIC.value
    prior_mean: float = 0.5
    prior_var: float = 0.05
    prior_mean_file: Optional[Path] = None
    prior_var_file: Optional[Path] = None
    external_command: Optional[str] = None
    value_min: float = 0.0
    value_max: float = 1.0
    solve_method: str = SolveMethod.AUTO.value
    base_dir: Optional[Path] = None

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got "
                              f"{self.beta_start}, {self.beta_end}")
        if self.steps is not None and not 1 <= self.steps <= self.T:
            raise ConfigError(f"steps must be in [1, T={self.T}], got {self.steps}")
        if self.value_min >= self.value_max:
            raise ConfigError("value_min must be below value_max")
        if (self.prior_mean_file is None) != (self.prior_var_file is None):
            raise ConfigError("prior_mean_file and prior_var_file go together")
        if self.denoiser == DenoiserKind.EXTERNAL.value and not self.external_command:
            raise ConfigError("denoiser=external needs external_command")

    @property
    def num_sampling_steps(self) -> int:
        return self.steps if self.steps is not None else self.T

    @property
    def sampler_kind(self) -> SamplerKind:
        return SamplerKind(self.sampler)

    @property
    def value_range(self) -> Tuple[float, float]:
        return (self.value_min, self.value_max)

    def schedule(self) -> DiffusionSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def plan(self, schedule: Optional[DiffusionSchedule] = None) -> TimestepPlan:
        return uniform_timestep_plan(schedule or self.schedule(), self.num_sampling_steps)

    def guidance(self) -> GuidanceConfig:
        """Guidance settings; call after ``with_presets``."""
        return GuidanceConfig(
            mu=FALLBACK_MU if self.mu is None else self.mu,
            zeta=FALLBACK_ZETA if self.zeta is None else self.zeta,
            sigma_y=self.sigma_y or 0.0,
            mean_correction=self.mean_correction,
            jacobian_term=self.jacobian_term,
            solve_method=self.solve_method,
        )

    def with_presets(self, descriptor: OperatorDescriptor, sigma_y: float) -> "RunConfig":
        """
        Fill mu, zeta and sigma_y from the degradation.

        Values given explicitly are kept; a degradation missing from the
        preset table falls back to mu = 1, zeta = 1.
        """
        changes: Dict[str, Any] = {}
        if self.sigma_y is None:
            changes["sigma_y"] = float(sigma_y)
        noise = self.sigma_y if self.sigma_y is not None else float(sigma_y)

        if self.mu is None or self.zeta is None:
            values = preset_values(descriptor, noise, self.preset)
            if values is None:
                logger.info(f"No {self.preset} preset for {descriptor.format()} at sigma_y={noise}; "
                            f"using mu={FALLBACK_MU}, zeta={FALLBACK_ZETA}")
                values = (FALLBACK_MU, FALLBACK_ZETA)
            else:
                logger.info(f"Applied {self.preset} preset for {descriptor.format()} at "
                            f"sigma_y={noise}: mu={values[0]}, zeta={values[1]}")
            if self.mu is None:
                changes["mu"] = values[0]
            if self.zeta is None:
                changes["zeta"] = values[1]
        return replace(self, **changes) if changes else self

    def resolve_path(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if self.base_dir is not None and not path.is_absolute():
            return self.base_dir / path
        return path

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Path):
                data[key] = str(value)
        return data


def _non_negative(cast: Callable[[str], Any]) -> Callable[[str], Any]:
    def convert(text: str):
        value = cast(text)
        if not value >= 0:
            raise ValueError(f"must be >= 0, got {text}")
        return value
    return convert


def _bounded(cast: Callable[[str], Any], lo: float, hi: float) -> Callable[[str], Any]:
    def convert(text: str):
        value = cast(text)
        if not lo <= value <= hi:
            raise ValueError(f"must be in [{lo}, {hi}], got {text}")
        return value
    return convert


def _choice(values) -> Callable[[str], str]:
    allowed = [v.value for v in values]

    def convert(text: str) -> str:
        text = text.strip().lower()
        if text not in allowed:
            raise ValueError(f"expected one of {allowed}, got '{text}'")
        return text
    return convert


def _operator(text: str) -> str:
    OperatorDescriptor.parse(text)
    return text.strip()


def _finite(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"must be finite, got {text}")
    return value


def _positive(text: str) -> float:
    value = _finite(text)
    if value <= 0:
        raise ValueError(f"must be > 0, got {text}")
    return value


_CONVERTERS: Dict[str, Callable[[str], Any]] = {
    "T": _bounded(int, 1, 10 ** 6),
    "beta_start": _bounded(float, 0.0, 1.0),
    "beta_end": _bounded(float, 0.0, 1.0),
    "sampler": _choice(SamplerKind),
    "steps": _bounded(int, 1, 10 ** 6),
    "mu": _non_negative(_finite),
    "zeta": _bounded(float, 0.0, 1.0),
    "rho": _non_negative(_finite),
    "sigma_y": _non_negative(_finite),
    "seed": _bounded(int, 0, 2 ** 64 - 1),
    "snapshot_stride": _non_negative(int),
    "mean_correction": parse_bool,
    "jacobian_term": parse_bool,
    "operator": _operator,
    "preset": _choice(Preset),
    "denoiser": _choice(DenoiserKind),
    "prior_mean": _finite,
    "prior_var": _positive,
    "prior_mean_file": Path,
    "prior_var_file": Path,
    "external_command": str,
    "value_min": _finite,
    "value_max": _finite,
    "solve_method": _choice(SolveMethod),
}

CONFIG_KEYS = frozenset(_CONVERTERS)


def parse_config(text: str, base_dir: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Parse run-config text.

    Args:
        text: ``key=value`` lines; blank lines and ``#`` comments are skipped
        base_dir: Directory that relative file paths resolve against

    Returns:
        RunConfig with defaults for omitted keys

    Raises:
        ConfigError: On syntax errors, unknown or duplicate keys, bad values
            (with the line number) and missing referenced files
    """
    base = Path(base_dir) if base_dir is not None else None
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected key=value, got '{line}'", line=number)
        if key not in _CONVERTERS:
            raise ConfigError(f"unknown key '{key}'", line=number)
        if key in values:
            raise ConfigError(f"duplicate key '{key}' (first set on line {lines[key]})", line=number)
        try:
            values[key] = _CONVERTERS[key](value)
        except (ValueError, DomainError) as e:
            raise ConfigError(f"bad value for {key}: {e}", line=number) from e
        lines[key] = number

    for key in ("prior_mean_file", "prior_var_file"):
        if key in values:
            path = values[key]
            if base is not None and not path.is_absolute():
                path = base / path
            if not path.exists():
                raise ConfigError(f"{key} not found: {path}", line=lines[key])
            values[key] = path

    if "operator" in values:
        kernel = OperatorDescriptor.parse(values["operator"]).params.get("kernel")
        if kernel is not None:
            path = Path(str(kernel))
            if base is not None and not path.is_absolute():
                path = base / path
            if not path.exists():
                raise ConfigError(f"kernel file not found: {path}", line=lines["operator"])

    return RunConfig(base_dir=base, **values)


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Parse a config file; None gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
