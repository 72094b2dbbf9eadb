"""
Tests for image and tensor files and seeded random streams.
"""

import numpy as np
import pytest

from nrlg.errors import FormatError
from nrlg.io import (
    decode_tensor,
    encode_tensor,
    make_rng,
    quantize,
    read_image,
    read_tensor,
    split_streams,
    write_image,
    write_tensor,
)


def write_pgm(path, width, height, body, header_extra=b""):
    path.write_bytes(b"P5\n" + header_extra + f"{width} {height}\n255\n".encode() + body)
    return path


class TestReadImage:
    """Test PGM/PPM decoding."""

    def test_zero_pgm(self, tmp_path):
        x = read_image(write_pgm(tmp_path / "z.pgm", 4, 3, bytes(12)))
        assert x.shape == (3, 4, 1)
        assert np.all(x == 0)

    def test_value_scaling(self, tmp_path):
        x = read_image(write_pgm(tmp_path / "v.pgm", 2, 1, bytes([128, 255])))
        assert x[0, 0, 0] == 128 / 255
        assert x[0, 1, 0] == 1.0

    def test_header_comment(self, tmp_path):
        x = read_image(write_pgm(tmp_path / "c.pgm", 2, 2, bytes([1, 2, 3, 4]),
                                 header_extra=b"# made by hand\n"))
        np.testing.assert_array_equal(x[:, :, 0] * 255, [[1, 2], [3, 4]])

    def test_color(self, color_image):
        path, x = color_image
        np.testing.assert_array_equal(read_image(path), x)

    @pytest.mark.parametrize("content", [
        b"P2\n2 2\n255\n1 2 3 4",
        b"P5\n2 2\n",
        b"not an image at all",
        b"P5\n2 2\n65535\n" + bytes(8),
        b"P5\n0 2\n255\n",
    ])
    def test_malformed(self, tmp_path, content):
        path = tmp_path / "bad.pgm"
        path.write_bytes(content)
        with pytest.raises(FormatError):
            read_image(path)

    def test_truncated_pixels(self, tmp_path):
        with pytest.raises(FormatError):
            read_image(write_pgm(tmp_path / "t.pgm", 4, 4, bytes(5)))


class TestWriteImage:
    """Test quantized image output."""

    def test_write_read_idempotent(self, gray_image, tmp_path):
        path, x = gray_image
        again = write_image(tmp_path / "again.pgm", read_image(path))
        np.testing.assert_array_equal(read_image(again), x)
        assert again.read_bytes() == path.read_bytes()

    def test_p5_header(self, tmp_path):
        path = write_image(tmp_path / "h.pgm", np.zeros((2, 3, 1)))
        assert path.read_bytes().startswith(b"P5")

    def test_p6_header(self, tmp_path):
        path = write_image(tmp_path / "h.ppm", np.zeros((2, 3, 3)))
        assert path.read_bytes().startswith(b"P6")

    def test_quantize_clamps(self):
        np.testing.assert_array_equal(quantize(np.array([-0.2, 0.0, 128 / 255, 1.0, 1.7])),
                                      [0, 0, 128, 255, 255])

    def test_bad_channel_count(self, tmp_path):
        with pytest.raises(FormatError):
            write_image(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


class TestTensorFiles:
    """Test the raw tensor container."""

    def test_bit_exact(self, tmp_path, rng):
        x = rng.standard_normal((5, 4, 3)) * 1e3
        x[0, 0, 0] = -0.0
        x[1, 1, 1] = 1e-310
        path = write_tensor(tmp_path / "x.nrtf", x)
        back = read_tensor(path)
        assert back.shape == x.shape
        assert back.tobytes() == x.astype("<f8").tobytes()

    def test_layout(self):
        data = encode_tensor(np.array([1.0, 2.0]))
        assert data[:4] == b"NRTF"
        assert len(data) == 4 + 2 + 1 + 4 + 16

    def test_bad_magic(self):
        data = b"XXXX" + encode_tensor(np.zeros(2))[4:]
        with pytest.raises(FormatError):
            decode_tensor(data)

    def test_unsupported_version(self):
        data = bytearray(encode_tensor(np.zeros(2)))
        data[4] = 9
        with pytest.raises(FormatError):
            decode_tensor(bytes(data))

    @pytest.mark.parametrize("end", [3, 9, -3])
    def test_truncated(self, end):
        """Cut inside the header, inside the dims and inside the payload."""
        with pytest.raises(FormatError):
            decode_tensor(encode_tensor(np.zeros((2, 2)))[:end])


class TestRandomStreams:
    """Test seeded generators."""

    def test_make_rng_reproducible(self):
        first, second = make_rng(42).standard_normal(4), make_rng(42).standard_normal(4)
        np.testing.assert_array_equal(first, second)

    def test_streams_differ(self):
        init, step = split_streams(5)
        assert not np.array_equal(init.standard_normal(4), step.standard_normal(4))

    def test_step_seed_keeps_initial_stream(self):
        init_a, step_a = split_streams(5)
        init_b, step_b = split_streams(5, step_seed=99)
        np.testing.assert_array_equal(init_a.standard_normal(4), init_b.standard_normal(4))
        assert not np.array_equal(step_a.standard_normal(4), step_b.standard_normal(4))
