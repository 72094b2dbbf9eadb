"""
Tests for PSNR, SSIM and metric aggregation.
"""

import math

import numpy as np
import pytest

from nrlg.errors import DomainError, ShapeMismatchError
from nrlg.metrics import (
    SSIM_K1,
    SSIM_K2,
    aggregate,
    evaluate,
    gaussian_window,
    mse,
    psnr,
    ssim,
    ssim_map,
)


def brute_force_ssim(x, ref, peak=1.0):
    """SSIM of an 11x11 patch pair computed from weighted sums."""
    w = gaussian_window()
    mu_x, mu_r = np.sum(w * x), np.sum(w * ref)
    var_x = np.sum(w * (x - mu_x) ** 2)
    var_r = np.sum(w * (ref - mu_r) ** 2)
    cov = np.sum(w * (x - mu_x) * (ref - mu_r))
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    return ((2 * mu_x * mu_r + c1) * (2 * cov + c2)
            / ((mu_x ** 2 + mu_r ** 2 + c1) * (var_x + var_r + c2)))


class TestPsnr:
    """Test peak signal-to-noise ratio."""

    def test_identical_is_infinite(self, rng):
        x = rng.uniform(0, 1, (8, 8, 1))
        assert psnr(x, x) == math.inf

    def test_uniform_offset(self):
        ref = np.full((16, 16, 3), 0.4)
        assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)

    def test_peak(self):
        ref = np.zeros((4, 4))
        assert psnr(ref + 25.5, ref, peak=255.0) == pytest.approx(20.0, abs=1e-9)

    def test_mse(self):
        assert mse(np.array([1.0, 3.0]), np.array([0.0, 0.0])) == 5.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_invalid_peak(self):
        with pytest.raises(DomainError):
            psnr(np.zeros(3), np.ones(3), peak=0.0)


class TestSsim:
    """Test structural similarity."""

    def test_identical_is_one(self, rng):
        x = rng.uniform(0, 1, (24, 24, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_matches_brute_force(self, rng):
        x, ref = rng.uniform(0, 1, (2, 11, 11))
        value = ssim_map(x, ref)
        assert value.shape == (1, 1)
        assert value[0, 0] == pytest.approx(brute_force_ssim(x, ref), rel=1e-10)

    def test_map_is_valid_mode(self, rng):
        x, ref = rng.uniform(0, 1, (2, 20, 15))
        assert ssim_map(x, ref).shape == (10, 5)
        manual = brute_force_ssim(x[3:14, 2:13], ref[3:14, 2:13])
        assert ssim_map(x, ref)[3, 2] == pytest.approx(manual, rel=1e-10)

    def test_scale_invariance(self, rng):
        """Scaling both images and the peak leaves SSIM unchanged."""
        x, ref = rng.uniform(0, 1, (2, 16, 16, 1))
        assert ssim(255 * x, 255 * ref, peak=255.0) == pytest.approx(ssim(x, ref), rel=1e-9)

    def test_constant_images(self):
        """Flat images reduce SSIM to the luminance term."""
        x, ref = np.full((12, 12), 0.5), np.full((12, 12), 0.25)
        c1 = SSIM_K1 ** 2
        expected = (2 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1)
        assert ssim(x, ref) == pytest.approx(expected, rel=1e-9)

    def test_symmetric_and_bounded(self, rng):
        x, ref = rng.uniform(0, 1, (2, 16, 16))
        assert ssim(x, ref) == pytest.approx(ssim(ref, x), rel=1e-12)
        assert -1.0 <= ssim(x, ref) < 1.0

    def test_channels_averaged(self, rng):
        x, ref = rng.uniform(0, 1, (2, 16, 16, 2))
        per_channel = [ssim(x[..., c], ref[..., c]) for c in range(2)]
        assert ssim(x, ref) == pytest.approx(np.mean(per_channel), rel=1e-12)

    def test_too_small(self):
        with pytest.raises(DomainError):
            ssim(np.zeros((10, 10, 1)), np.zeros((10, 10, 1)))

    def test_window_normalized(self):
        w = gaussian_window()
        assert w.shape == (11, 11)
        assert w.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(w, w.T)


class TestAggregate:
    """Test per-image reports and their mean."""

    def test_rows(self, rng):
        ref = rng.uniform(0.2, 0.8, (3, 16, 16, 1))
        reports = [
            evaluate(ref[0], ref[0], "a"),
            evaluate(ref[1] + 0.1, ref[1], "b"),
            evaluate(ref[2] + 0.01, ref[2], "c"),
        ]
        table = aggregate(reports)
        rows = table.rows()
        assert rows[0] == ["image_id", "psnr_db", "ssim"]
        assert [r[0] for r in rows[1:]] == ["a", "b", "c", "mean"]
        assert rows[1][1] == "inf"
        assert rows[2][1] == "20.0000"
        assert rows[4][1] == "inf"
        assert float(rows[1][2]) == pytest.approx(1.0)

    def test_finite_mean(self, rng):
        ref = rng.uniform(0.2, 0.8, (2, 16, 16, 1))
        table = aggregate([evaluate(ref[0] + 0.1, ref[0], "a"),
                           evaluate(ref[1] + 0.01, ref[1], "b")])
        assert table.mean_psnr == pytest.approx(30.0, abs=1e-6)
        data = table.to_dict()
        assert data["ssim_settings"]["window"] == 11
        assert len(data["images"]) == 2

    def test_empty(self):
        assert math.isnan(aggregate([]).mean_psnr)
