"""
Measurement generation y = A x0 + sigma_y * g and measurement artifacts.

A measurement on disk is a tensor file holding y plus a JSON sidecar
(``<name>.json``) with the operator descriptor, image shape, sigma_y, seed
and value-range convention. The sidecar alone rebuilds A.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .errors import DomainError, FormatError
from .io import TENSOR_SUFFIX, make_rng, read_tensor, write_tensor
from .linops import LinearOperator, OperatorDescriptor, build_operator


logger = logging.getLogger(__name__)

SIDECAR_VERSION = 1
DEFAULT_VALUE_RANGE = (0.0, 1.0)


@dataclass
class Measurement:
    """A degraded observation and everything needed to replay it.

    Attributes:
        y: Measurement array (operator output shape)
        sigma_y: Noise standard deviation
        descriptor: Operator descriptor with all parameters
        image_shape: (H, W, C) of the unknown image
        seed: Seed of the noise draw
        value_range: Value convention of x0
        source: Optional reference to the source image
    """
    y: np.ndarray
    sigma_y: float
    descriptor: OperatorDescriptor
    image_shape: Tuple[int, ...]
    seed: int = 0
    value_range: Tuple[float, float] = DEFAULT_VALUE_RANGE
    source: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.y)):
            raise DomainError("measurement contains non-finite values")

    def operator(self, base_dir: Optional[Path] = None) -> LinearOperator:
        """Rebuild the operator from the descriptor."""
        return build_operator(self.descriptor, self.image_shape, base_dir=base_dir)

    def sidecar(self) -> Dict[str, Any]:
        return {
            "format_version": SIDECAR_VERSION,
            "operator": self.descriptor.to_dict(),
            "image_shape": list(self.image_shape),
            "measurement_shape": list(self.y.shape),
            "sigma_y": self.sigma_y,
            "seed": self.seed,
            "value_range": list(self.value_range),
            "source": self.source,
            **self.extra,
        }


def degrade(
    op: LinearOperator,
    x0: np.ndarray,
    sigma_y: float,
    seed: int,
    value_range: Tuple[float, float] = DEFAULT_VALUE_RANGE,
    source: Optional[str] = None,
) -> Measurement:
    """
    Apply the operator and add seeded Gaussian noise in measurement space.

    Args:
        op: Degradation operator
        x0: Clean image of ``op.input_shape``
        sigma_y: Noise standard deviation; 0 gives y = A x0 exactly
        seed: Unsigned 64-bit seed of the noise draw
        value_range: Allowed range of x0
        source: Optional source reference recorded in the sidecar

    Returns:
        Measurement

    Raises:
        DomainError: If sigma_y < 0 or x0 leaves the value range
        ShapeMismatchError: If x0 does not fit the operator
    """
    if not np.isfinite(sigma_y) or sigma_y < 0:
        raise DomainError(f"sigma_y must be >= 0, got {sigma_y}")
    x0 = np.asarray(x0, dtype=np.float64)
    lo, hi = value_range
    if x0.size and (x0.min() < lo or x0.max() > hi):
        raise DomainError(f"x0 values [{x0.min():.4g}, {x0.max():.4g}] leave the range [{lo}, {hi}]")

    y = op.apply(x0)
    if sigma_y > 0:
        y = y + sigma_y * make_rng(seed).standard_normal(y.shape)
    logger.debug(f"Degraded with {op.descriptor.format()}, sigma_y={sigma_y}, seed={seed}")
    return Measurement(
        y=y,
        sigma_y=float(sigma_y),
        descriptor=op.descriptor,
        image_shape=op.input_shape,
        seed=int(seed),
        value_range=(float(lo), float(hi)),
        source=source,
    )


def sidecar_path(tensor_path: Union[str, Path]) -> Path:
    return Path(tensor_path).with_suffix(".json")


def save_measurement(measurement: Measurement, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the measurement tensor and its sidecar; returns both paths."""
    path = Path(path)
    if path.suffix != TENSOR_SUFFIX:
        path = path.with_suffix(TENSOR_SUFFIX)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(path, measurement.y)
    side = sidecar_path(path)
    side.write_text(json.dumps(measurement.sidecar(), indent=2, sort_keys=True))
    return path, side


def load_measurement(path: Union[str, Path]) -> Measurement:
    """
    Read a measurement tensor and its sidecar.

    Raises:
        FileNotFoundError: If the measurement tensor does not exist
        FormatError: If the sidecar is missing fields or disagrees with the tensor
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"measurement not found: {path}")
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"missing measurement sidecar {side}")
    try:
        record = json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{side}: invalid JSON ({e})") from e

    try:
        descriptor = OperatorDescriptor.from_dict(record["operator"])
        image_shape = tuple(int(d) for d in record["image_shape"])
        sigma_y = float(record["sigma_y"])
        seed = int(record.get("seed", 0))
        value_range = tuple(float(v) for v in record.get("value_range", DEFAULT_VALUE_RANGE))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{side}: incomplete sidecar ({e})") from e

    y = read_tensor(path)
    expected = record.get("measurement_shape")
    if expected is not None and list(y.shape) != list(expected):
        raise FormatError(f"{path}: tensor shape {y.shape} != sidecar {tuple(expected)}")
    return Measurement(
        y=y,
        sigma_y=sigma_y,
        descriptor=descriptor,
        image_shape=image_shape,
        seed=seed,
        value_range=(value_range[0], value_range[1]),
        source=record.get("source"),
    )
