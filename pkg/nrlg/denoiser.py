"""
Noise predictors eps(x_t, t).

``AnalyticDenoiser`` is the exact MMSE predictor under a diagonal Gaussian
prior (the analytic lab). ``ExternalDenoiser`` talks to a pretrained model
running in a child process through the protocol in ``nrlg.protocol``.
"""

import logging
import shlex
import subprocess
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import protocol
from .errors import (
    CapabilityError,
    DomainError,
    NonFiniteError,
    ProtocolError,
    ShapeMismatchError,
    TransportError,
)
from .io import read_tensor
from .schedule import DiffusionSchedule


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Prior N(mean, diag(variance)) over images.

    Attributes:
        mean: Prior mean, any shape
        variance: Positive per-entry variances, same shape as mean
    """
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        variance = np.broadcast_to(np.asarray(self.variance, dtype=np.float64), mean.shape).copy()
        if not np.all(np.isfinite(mean)):
            raise DomainError("prior mean must be finite")
        if not np.all(np.isfinite(variance)) or np.any(variance <= 0):
            raise DomainError("prior variances must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mean.shape

    @classmethod
    def isotropic(cls, shape: Sequence[int], mean: float, variance: float) -> "GaussianPrior":
        return cls(np.full(tuple(shape), float(mean)), np.full(tuple(shape), float(variance)))

    @classmethod
    def from_files(
        cls, mean_path: Union[str, Path], variance_path: Union[str, Path]
    ) -> "GaussianPrior":
        return cls(read_tensor(mean_path), read_tensor(variance_path))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal(self.shape)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "shape": list(self.shape),
            "mean_range": [float(self.mean.min()), float(self.mean.max())],
            "variance_range": [float(self.variance.min()), float(self.variance.max())],
        }


def _check_shape(x: np.ndarray, shape: Tuple[int, ...], what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != shape:
        raise ShapeMismatchError(what, shape, x.shape)
    return x


def conditional_mean(
    prior: GaussianPrior, schedule: DiffusionSchedule, x_t: np.ndarray, t: int
) -> np.ndarray:
    """Exact E[x0 | x_t] under the prior for x_t = sqrt(ab) x0 + sqrt(1-ab) eps."""
    schedule.check_timestep(t)
    x_t = _check_shape(x_t, prior.shape, "x_t")
    ab = schedule.alpha_bar(t)
    c0 = prior.variance
    return (np.sqrt(ab) * c0 * x_t + (1.0 - ab) * prior.mean) / (ab * c0 + 1.0 - ab)


def conditional_variance(prior: GaussianPrior, schedule: DiffusionSchedule, t: int) -> np.ndarray:
    """Exact diagonal Cov[x0 | x_t] (independent of x_t)."""
    schedule.check_timestep(t)
    ab = schedule.alpha_bar(t)
    c0 = prior.variance
    return c0 * (1.0 - ab) / (ab * c0 + 1.0 - ab)


def analytic_predict_noise(
    prior: GaussianPrior, schedule: DiffusionSchedule, x_t: np.ndarray, t: int
) -> np.ndarray:
    """
    Optimal MMSE noise prediction under the Gaussian prior.

    eps* = (x_t - sqrt(ab) * E[x0|x_t]) / sqrt(1 - ab)
    """
    ab = schedule.alpha_bar(t)
    mean = conditional_mean(prior, schedule, x_t, t)
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * mean) / np.sqrt(1.0 - ab)


def analytic_noise_jacobian(prior: GaussianPrior, schedule: DiffusionSchedule, t: int) -> np.ndarray:
    """Diagonal d eps*_i / d x_t_i = sqrt(1-ab) / (ab*c0_i + 1 - ab)."""
    schedule.check_timestep(t)
    ab = schedule.alpha_bar(t)
    return np.sqrt(1.0 - ab) / (ab * prior.variance + 1.0 - ab)


class Denoiser(ABC):
    """Noise predictor interface."""

    has_exact_jacobian: bool = False

    @property
    @abstractmethod
    def shape(self) -> Tuple[int, ...]:
        ...

    @abstractmethod
    def predict_noise(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ...

    def noise_jacobian(self, t: int) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} does not provide a noise Jacobian")

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
        return False

    def describe(self) -> Dict[str, Any]:
        return {"type": type(self).__name__}


class AnalyticDenoiser(Denoiser):
    """Exact predictor of the Gaussian lab; pure and freely shareable."""

    has_exact_jacobian = True

    def __init__(self, prior: GaussianPrior, schedule: DiffusionSchedule):
        self.prior = prior
        self.schedule = schedule

    @property
    def shape(self):
        return self.prior.shape

    def predict_noise(self, x_t, t):
        return analytic_predict_noise(self.prior, self.schedule, x_t, t)

    def noise_jacobian(self, t):
        return analytic_noise_jacobian(self.prior, self.schedule, t)

    def conditional_mean(self, x_t, t):
        return conditional_mean(self.prior, self.schedule, x_t, t)

    def describe(self):
        return {"type": "analytic", "prior": self.prior.to_dict()}


class ExternalDenoiser(Denoiser):
    """
    Client for a noise predictor served by a child process.

    One request is in flight at a time; concurrent callers are serialized
    by a per-endpoint lock. Any protocol or transport failure terminates the
    child.
    """

    def __init__(
        self,
        command: Union[str, Sequence[str]],
        schedule: DiffusionSchedule,
        shape: Sequence[int],
        version: int = protocol.PROTOCOL_VERSION,
    ):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise DomainError("external denoiser command is empty")
        self.schedule = schedule
        self._shape = tuple(int(d) for d in shape)
        self.version = version
        self._process: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()

    @property
    def shape(self):
        return self._shape

    @property
    def running(self) -> bool:
        return self._process is not None and self._process.poll() is None

    def start(self) -> None:
        """Launch the child and complete the handshake."""
        with self._lock:
            self._start_locked()

    def _start_locked(self) -> None:
        if self.running:
            return
        logger.info(f"Starting external denoiser: {' '.join(self.command)}")
        try:
            self._process = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as e:
            raise TransportError(f"cannot launch external denoiser: {e}") from e

        hello = protocol.Handshake(
            version=self.version,
            num_steps=self.schedule.num_steps,
            beta_start=self.schedule.beta_start,
            beta_end=self.schedule.beta_end,
            shape=self._shape,
        )
        try:
            protocol.write_frame(self._process.stdin, protocol.encode_handshake(hello))
            reply = protocol.read_frame(self._process.stdout)
            version, status = protocol.decode_handshake_reply(reply)
            if version != self.version:
                raise ProtocolError(f"protocol version mismatch: peer speaks {version}, "
                                    f"we speak {self.version}")
            if status != protocol.STATUS_OK:
                raise ProtocolError(f"peer rejected handshake with status {status}")
        except Exception:
            self._terminate()
            raise
        logger.info(f"External denoiser handshake complete (shape {self._shape})")

    def predict_noise(self, x_t, t):
        x_t = _check_shape(x_t, self._shape, "external denoiser input")
        self.schedule.check_timestep(t)
        with self._lock:
            self._start_locked()
            try:
                protocol.write_frame(self._process.stdin, protocol.encode_predict_request(x_t, t))
                payload = protocol.decode_predict_response(protocol.read_frame(self._process.stdout))
                if payload.size != x_t.size:
                    raise ShapeMismatchError("external denoiser output", self._shape, payload.shape)
            except Exception:
                self._terminate()
                raise
        if not np.all(np.isfinite(payload)):
            raise NonFiniteError("external denoiser returned non-finite noise", step=None, t=t)
        return payload.astype(np.float64).reshape(self._shape)

    def _terminate(self) -> None:
        process, self._process = self._process, None
        if process is None:
            return
        for stream in (process.stdin, process.stdout):
            try:
                if stream:
                    stream.close()
            except OSError:
                pass
        if process.poll() is None:
            process.terminate()
            try:
                process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                process.kill()
                process.wait()
        logger.info("External denoiser stopped")

    def close(self):
        with self._lock:
            self._terminate()

    def describe(self):
        return {"type": "external", "command": self.command, "protocol_version": self.version}
