"""
Exception hierarchy for nrlg.

All errors raised by the library derive from NRLGError so callers (and the
CLI exit-code mapping) can catch them by family.
"""

from typing import Any, Dict, Optional


class NRLGError(Exception):
    """Base class for all nrlg errors."""


class DomainError(NRLGError, ValueError):
    """A parameter lies outside its admissible range."""


class ShapeMismatchError(NRLGError, ValueError):
    """A tensor does not have the shape an operation expects."""

    def __init__(self, what: str, expected: Any, actual: Any):
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class CapabilityError(NRLGError):
    """An operator or denoiser lacks a required capability (SVD, Jacobian)."""


class SingularSystemError(NRLGError, ArithmeticError):
    """The kernel system (c*A*A^T + sigma2*I) is singular."""


class ConvergenceError(NRLGError, ArithmeticError):
    """The iterative kernel solve did not reach tolerance."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message)


class NonFiniteError(NRLGError, ArithmeticError):
    """
    A sampler or denoiser produced NaN or Inf; carries the last finite state.

    ``step`` is None when raised outside the sampling loop (a denoiser reply);
    the sampler re-raises it with the step and state filled in.
    """

    def __init__(
        self,
        message: str,
        step: Optional[int],
        t: int,
        last_good: Optional[Dict[str, Any]] = None,
    ):
        self.reason = message
        self.step = step
        self.t = t
        self.last_good = last_good or {}
        where = f"t={t}" if step is None else f"step {step}, t={t}"
        super().__init__(f"{message} ({where})")


class ConfigError(NRLGError, ValueError):
    """Run configuration could not be parsed or validated."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(NRLGError, ValueError):
    """A tensor, image, kernel or sidecar file is malformed."""


class ProtocolError(NRLGError):
    """The external denoiser violated the wire protocol."""


class TransportError(NRLGError):
    """The external denoiser process could not be reached or died."""
