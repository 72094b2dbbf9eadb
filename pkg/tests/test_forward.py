"""
Tests for measurement synthesis and measurement files.
"""

import json

import numpy as np
import pytest

from nrlg.errors import DomainError, FormatError, ShapeMismatchError
from nrlg.forward import degrade, load_measurement, save_measurement, sidecar_path
from nrlg.linops import build_operator


class TestDegrade:
    """Test y = A x0 + sigma_y * noise."""

    def test_noiseless_identity(self, gray_image):
        _, x = gray_image
        m = degrade(build_operator("identity", x.shape), x, 0.0, seed=3)
        np.testing.assert_array_equal(m.y, x)

    def test_noise_statistics(self, rng):
        """The noise has the requested standard deviation (within 3 standard errors)."""
        x = rng.uniform(0, 1, (256, 256, 1))
        m = degrade(build_operator("identity", x.shape), x, 0.25, seed=11)
        noise = (m.y - x).ravel()
        n = noise.size
        assert abs(noise.mean()) <= 3 * 0.25 / np.sqrt(n)
        assert abs(noise.std() - 0.25) <= 3 * 0.25 / np.sqrt(2 * n)

    def test_seed_reproducible(self, gray_image):
        _, x = gray_image
        op = build_operator("cs:ratio=0.25,block=8,seed=1", x.shape)
        first = degrade(op, x, 0.05, seed=9)
        np.testing.assert_array_equal(degrade(op, x, 0.05, seed=9).y, first.y)
        assert not np.array_equal(degrade(op, x, 0.05, seed=10).y, first.y)

    def test_records_descriptor(self, gray_image):
        _, x = gray_image
        m = degrade(build_operator("gaussian_blur", x.shape), x, 0.01, seed=1, source="clean.pgm")
        assert m.descriptor.kind == "gaussian_blur"
        assert m.descriptor.params == {"size": 5, "std": 10.0}
        assert m.image_shape == x.shape
        assert m.source == "clean.pgm"

    @pytest.mark.parametrize("sigma", [-0.1, float("nan")])
    def test_invalid_sigma(self, gray_image, sigma):
        _, x = gray_image
        with pytest.raises(DomainError):
            degrade(build_operator("identity", x.shape), x, sigma, seed=0)

    def test_out_of_range(self):
        x = np.full((4, 4, 1), 1.5)
        with pytest.raises(DomainError):
            degrade(build_operator("identity", x.shape), x, 0.0, seed=0)

    def test_wrong_shape(self):
        with pytest.raises(ShapeMismatchError):
            degrade(build_operator("identity", (4, 4, 1)), np.zeros((5, 5, 1)), 0.0, seed=0)


class TestMeasurementFiles:
    """Test the tensor + sidecar pair."""

    def test_round_trip(self, gray_image, tmp_path):
        _, x = gray_image
        op = build_operator("mask:keep=0.3,seed=4", x.shape)
        m = degrade(op, x, 0.02, seed=5)
        tensor, side = save_measurement(m, tmp_path / "out" / "y")
        assert tensor.suffix == ".nrtf"
        assert side == sidecar_path(tensor)

        loaded = load_measurement(tensor)
        np.testing.assert_array_equal(loaded.y, m.y)
        assert loaded.sigma_y == 0.02
        assert loaded.seed == 5
        assert loaded.descriptor == m.descriptor
        rebuilt = loaded.operator()
        np.testing.assert_array_equal(rebuilt.apply(x), op.apply(x))

    def test_sidecar_fields(self, gray_image, tmp_path):
        _, x = gray_image
        m = degrade(build_operator("avgpool:factor=4", x.shape), x, 0.0, seed=0)
        _, side = save_measurement(m, tmp_path / "y.nrtf")
        record = json.loads(side.read_text())
        assert record["operator"] == {"kind": "avgpool", "params": {"factor": 4}}
        assert record["image_shape"] == [32, 32, 1]
        assert record["measurement_shape"] == [8, 8, 1]
        assert record["value_range"] == [0.0, 1.0]

    def test_missing_sidecar(self, gray_image, tmp_path):
        _, x = gray_image
        tensor, side = save_measurement(degrade(build_operator("identity", x.shape), x, 0.0, 0),
                                        tmp_path / "y.nrtf")
        side.unlink()
        with pytest.raises(FormatError):
            load_measurement(tensor)

    def test_missing_tensor(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_measurement(tmp_path / "none.nrtf")

    @pytest.mark.parametrize("mutate", [
        lambda r: r.pop("operator"),
        lambda r: r.update(measurement_shape=[1, 2, 3]),
        lambda r: r.update(sigma_y="loud"),
    ])
    def test_bad_sidecar(self, gray_image, tmp_path, mutate):
        _, x = gray_image
        tensor, side = save_measurement(degrade(build_operator("identity", x.shape), x, 0.0, 0),
                                        tmp_path / "y.nrtf")
        record = json.loads(side.read_text())
        mutate(record)
        side.write_text(json.dumps(record))
        with pytest.raises(FormatError):
            load_measurement(tensor)

    def test_invalid_json(self, gray_image, tmp_path):
        _, x = gray_image
        tensor, side = save_measurement(degrade(build_operator("identity", x.shape), x, 0.0, 0),
                                        tmp_path / "y.nrtf")
        side.write_text("{not json")
        with pytest.raises(FormatError):
            load_measurement(tensor)
