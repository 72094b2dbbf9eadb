"""
Diffusion noise schedules and sampling timestep plans.

Arrays are stored with a virtual index 0 so that ``alpha_bars[t]`` reads the
same as the math for t = 0..T (beta_0 = 0, alpha_bar_0 = 1).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Tuple

import numpy as np

from .errors import DomainError


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Linear-in-t variance schedule with cumulative products.

    Attributes:
        num_steps: Number of diffusion steps T
        beta_start: First beta (t = 1)
        beta_end: Last beta (t = T)
        betas: Array of length T + 1, betas[0] = 0
        alphas: 1 - betas, alphas[0] = 1
        alpha_bars: Cumulative products, alpha_bars[0] = 1
    """
    num_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Return alpha_bar at timestep t (0 <= t <= T)."""
        if not 0 <= t <= self.num_steps:
            raise DomainError(f"timestep {t} outside [0, {self.num_steps}]")
        return float(self.alpha_bars[t])

    def check_timestep(self, t: int) -> None:
        """Raise DomainError unless 1 <= t <= T."""
        if not 1 <= int(t) <= self.num_steps:
            raise DomainError(f"timestep {t} outside [1, {self.num_steps}]")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "T": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """
    Build a linear beta schedule.

    Betas are interpolated at T equally spaced points including both
    endpoints; for T = 1 the single beta equals beta_start.

    Args:
        T: Number of diffusion steps (>= 1)
        beta_start: First beta, 0 < beta_start <= beta_end
        beta_end: Last beta, < 1

    Returns:
        DiffusionSchedule

    Raises:
        DomainError: If the bounds are violated
    """
    if int(T) != T or T < 1:
        raise DomainError(f"T must be a positive integer, got {T}")
    T = int(T)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )

    if T == 1:
        interior = np.array([beta_start], dtype=np.float64)
    else:
        interior = np.linspace(beta_start, beta_end, T, dtype=np.float64)

    betas = np.concatenate([[0.0], interior])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)

    logger.debug(f"Linear schedule T={T}, alpha_bar_T={alpha_bars[-1]:.6g}")
    return DiffusionSchedule(
        num_steps=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing timesteps ending at 1, each paired with its predecessor."""
    timesteps: Tuple[int, ...]
    previous: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.timesteps)

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        return iter(zip(self.timesteps, self.previous))

    def pairs(self) -> List[Tuple[int, int]]:
        return list(self)


def uniform_timestep_plan(schedule: DiffusionSchedule, num_sampling_steps: int) -> TimestepPlan:
    """
    Evenly spaced decreasing timesteps covering (T..1].

    The rule is ``round(linspace(T, 1, n))``; rounding never collides because
    the spacing is at least 1 whenever n <= T.

    Args:
        schedule: Schedule providing T
        num_sampling_steps: Number of sampling steps n, 1 <= n <= T

    Returns:
        TimestepPlan whose last timestep is 1 with predecessor 0

    Raises:
        DomainError: If n is zero or exceeds T
    """
    T = schedule.num_steps
    n = int(num_sampling_steps)
    if n != num_sampling_steps or n < 1 or n > T:
        raise DomainError(f"num_sampling_steps must be in [1, {T}], got {num_sampling_steps}")

    if n == 1:
        steps = np.array([T])
    else:
        steps = np.rint(np.linspace(T, 1, n)).astype(int)

    timesteps = tuple(int(s) for s in steps)
    previous = timesteps[1:] + (0,)
    if any(p >= t for t, p in zip(timesteps, previous)):
        raise DomainError(f"plan is not strictly decreasing: {timesteps}")
    return TimestepPlan(timesteps=timesteps, previous=previous)
