"""
Pytest configuration for nrlg tests.
"""

import pytest
import numpy as np

from nrlg.denoiser import AnalyticDenoiser, GaussianPrior
from nrlg.io import make_rng, write_image
from nrlg.schedule import linear_schedule


@pytest.fixture
def schedule():
    """The default T=100 linear schedule."""
    return linear_schedule(100)


@pytest.fixture
def rng():
    """Seeded generator."""
    return make_rng(1234)


@pytest.fixture
def lab_shape():
    return (16, 16, 1)


@pytest.fixture
def lab_prior(lab_shape):
    """Isotropic Gaussian lab prior N(0.5, 0.01)."""
    return GaussianPrior.isotropic(lab_shape, 0.5, 0.01)


@pytest.fixture
def lab_denoiser(lab_prior, schedule):
    return AnalyticDenoiser(lab_prior, schedule)


@pytest.fixture
def gray_image(tmp_path):
    """A 32x32 single-channel PGM with a smooth gradient and its array."""
    yy, xx = np.mgrid[0:32, 0:32]
    pixels = ((xx * 4 + yy * 3) % 256).astype(np.float64) / 255.0
    x = pixels[:, :, None]
    path = write_image(tmp_path / "clean.pgm", x)
    return path, x


@pytest.fixture
def color_image(tmp_path):
    """A 16x16 PPM."""
    x = make_rng(7).integers(0, 256, size=(16, 16, 3)).astype(np.float64) / 255.0
    path = write_image(tmp_path / "clean.ppm", x)
    return path, x
