"""
Run artifacts: metadata records, residual logs and metric tables.

Every command writes ``<output>.meta.json`` next to its outputs. The record
echoes the command, its arguments and the resolved config, lists every
seed, the package versions, and xxh64 checksums of the written files so a
run can be replayed and its outputs verified.
"""

import csv
import getpass
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime
from io import StringIO
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO, Union

import numpy as np
import scipy

from . import __version__
from .checksum import checksum_artifacts
from .io import write_tensor
from .metrics import AggregateReport
from .samplers import Trajectory


logger = logging.getLogger(__name__)

METADATA_SUFFIX = ".meta.json"
RESIDUALS_SUFFIX = ".residuals.csv"


def package_versions() -> Dict[str, str]:
    return {
        "nrlg": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
    }


def _current_user() -> str:
    try:
        return getpass.getuser()
    except (KeyError, OSError):
        return "unknown"


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


@dataclass
class RunMetadata:
    """
    Metadata record of one command invocation.

    Attributes:
        command: CLI command name
        arguments: Echo of the command-line arguments
        config: Resolved run config, when the command has one
        seeds: Every seed used, by role
        operator: Operator descriptor record
        artifacts: File name -> xxh64 digest of each written artifact
        extra: Command-specific details
    """
    command: str
    arguments: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    seeds: Dict[str, Any] = field(default_factory=dict)
    operator: Optional[Dict[str, Any]] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=package_versions)
    timestamp: str = field(default_factory=lambda: datetime.now().isoformat())
    user: str = field(default_factory=_current_user)
    hostname: str = field(default_factory=platform.node)

    def add_artifacts(self, paths: Iterable[Union[str, Path]]) -> None:
        self.artifacts.update(checksum_artifacts(paths))

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def metadata_path(output: Union[str, Path]) -> Path:
    output = Path(output)
    return output.with_name(output.name + METADATA_SUFFIX)


def write_metadata(output: Union[str, Path], metadata: RunMetadata) -> Path:
    """Write the metadata record beside ``output``."""
    path = metadata_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metadata.to_json())
    logger.debug(f"Metadata written to {path}")
    return path


def read_metadata(output: Union[str, Path]) -> Dict[str, Any]:
    return json.loads(metadata_path(output).read_text())


def residuals_path(output: Union[str, Path]) -> Path:
    output = Path(output)
    return output.with_name(output.name + RESIDUALS_SUFFIX)


def write_residuals(output: Union[str, Path], trajectory: Trajectory) -> Path:
    """Write the per-step residual log as CSV (step, t, residual)."""
    path = residuals_path(output)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "t", "residual"])
        for record in trajectory.records:
            writer.writerow([record.step, record.t, repr(float(record.residual))])
    return path


def write_snapshots(directory: Union[str, Path], trajectory: Trajectory) -> List[Path]:
    """One tensor file per snapshot: step_XXXX_xt.nrtf and step_XXXX_x0.nrtf."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for snap in trajectory.snapshots:
        written.append(write_tensor(directory / f"step_{snap.step:04d}_xt.nrtf", snap.x_t))
        written.append(write_tensor(directory / f"step_{snap.step:04d}_x0.nrtf", snap.x0))
    return written


def write_metrics_csv(report: AggregateReport, out: Optional[TextIO] = None) -> str:
    """
    Render the metric table as CSV.

    Writes to ``out`` when given and always returns the CSV text.
    """
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(report.rows())
    text = buffer.getvalue()
    if out is not None:
        out.write(text)
    return text


def format_table(rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned plain-text table."""
    if not rows:
        return ""
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
