"""
Image fidelity metrics: PSNR and SSIM.

SSIM uses the usual 11x11 Gaussian window (sigma 1.5) with K1=0.01 and
K2=0.03, valid-mode filtering, and averages over channels.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Sequence

import numpy as np
from scipy.signal import convolve2d

from .errors import DomainError, ShapeMismatchError


logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim_constants() -> Dict[str, Any]:
    """SSIM settings echoed into report metadata."""
    return {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2}


def _pair(x: np.ndarray, ref: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeMismatchError("metric input", ref.shape, x.shape)
    return x, ref


def mse(x: np.ndarray, ref: np.ndarray) -> float:
    x, ref = _pair(x, ref)
    return float(np.mean((x - ref) ** 2))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB.

    Returns:
        10 * log10(peak^2 / MSE); ``inf`` when the images are identical

    Raises:
        ShapeMismatchError: If shapes differ
        DomainError: If peak is not positive
    """
    if peak <= 0:
        raise DomainError(f"peak must be positive, got {peak}")
    err = mse(x, ref)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    m = (size - 1) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return h / h.sum()


def _filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    return convolve2d(x, np.rot90(window, 2), mode="valid")


def ssim_map(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Local SSIM values of two single-channel images."""
    window = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    mu_x = _filter(x, window)
    mu_r = _filter(ref, window)
    var_x = _filter(x * x, window) - mu_x ** 2
    var_r = _filter(ref * ref, window) - mu_r ** 2
    cov = _filter(x * ref, window) - mu_x * mu_r

    num = (2 * mu_x * mu_r + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_r ** 2 + c1) * (var_x + var_r + c2)
    return num / den


def ssim(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """
    Mean structural similarity.

    Accepts (H, W) or (H, W, C) images; channel values are averaged.

    Raises:
        ShapeMismatchError: If shapes differ
        DomainError: If an image side is smaller than the window
    """
    if peak <= 0:
        raise DomainError(f"peak must be positive, got {peak}")
    x, ref = _pair(x, ref)
    if x.ndim == 2:
        x, ref = x[..., None], ref[..., None]
    if x.ndim != 3:
        raise DomainError(f"ssim expects (H, W) or (H, W, C) images, got {x.shape}")
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise DomainError(f"image {x.shape[:2]} is smaller than the "
                          f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    per_channel = [ssim_map(x[..., c], ref[..., c], peak).mean() for c in range(x.shape[2])]
    return float(np.mean(per_channel))


@dataclass
class MetricReport:
    """Metrics of one restored image against its reference."""
    image_id: str
    psnr_db: float
    ssim: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def psnr_text(self) -> str:
        return format_psnr(self.psnr_db)


@dataclass
class AggregateReport:
    """Per-image reports plus their mean."""
    reports: List[MetricReport] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        if not self.reports:
            return float("nan")
        return float(np.mean([r.psnr_db for r in self.reports]))

    @property
    def mean_ssim(self) -> float:
        if not self.reports:
            return float("nan")
        return float(np.mean([r.ssim for r in self.reports]))

    def rows(self) -> List[List[str]]:
        """CSV rows: header, one row per image, then the mean row."""
        rows = [["image_id", "psnr_db", "ssim"]]
        for r in self.reports:
            rows.append([r.image_id, r.psnr_text, f"{r.ssim:.6f}"])
        rows.append(["mean", format_psnr(self.mean_psnr), f"{self.mean_ssim:.6f}"])
        return rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            "images": [r.to_dict() for r in self.reports],
            "mean_psnr_db": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "ssim_settings": ssim_constants(),
        }


def format_psnr(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.4f}"


def evaluate(
    x: np.ndarray, ref: np.ndarray, image_id: str = "image", peak: float = 1.0
) -> MetricReport:
    """PSNR and SSIM of one pair."""
    return MetricReport(image_id=image_id, psnr_db=psnr(x, ref, peak), ssim=ssim(x, ref, peak))


def aggregate(reports: Sequence[MetricReport]) -> AggregateReport:
    return AggregateReport(list(reports))

