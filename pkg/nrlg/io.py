"""
File formats and the random-number contract.

- Tensor files (``.nrtf``): magic "NRTF", u16 version, u8 ndim, u32 dims,
  little-endian f64 payload in row-major order.
- Images: binary PGM (P5) and PPM (P6), 8-bit, maxval 255, decoded with
  Pillow and mapped to [0, 1] as (H, W, C) float64 arrays.
- Random numbers: numpy ``Generator`` on the PCG64 bit generator. Gaussian
  draws use numpy's ziggurat ``standard_normal``, which is stable across
  platforms for a given numpy release.
"""

import logging
import re
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError


logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"NRTF"
TENSOR_VERSION = 1
TENSOR_SUFFIX = ".nrtf"

_TENSOR_HEADER = struct.Struct("<4sHB")
_PNM_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                         rb"(?:#[^\n]*\n\s*)*(\d+)\s")


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------

def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array to the tensor file byte layout."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim > 255:
        raise FormatError(f"too many dimensions for a tensor file: {array.ndim}")
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + np.ascontiguousarray(array).astype("<f8").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse tensor file bytes; raises FormatError on any inconsistency."""
    if len(data) < _TENSOR_HEADER.size:
        raise FormatError("tensor file truncated in header")
    magic, version, ndim = _TENSOR_HEADER.unpack_from(data, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")

    offset = _TENSOR_HEADER.size
    if len(data) < offset + 4 * ndim:
        raise FormatError("tensor file truncated in dims")
    dims = struct.unpack_from(f"<{ndim}I", data, offset)
    offset += 4 * ndim

    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = data[offset:]
    if len(payload) != 8 * count:
        raise FormatError(f"tensor payload has {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def write_tensor(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write an array as a tensor file."""
    path = Path(path)
    path.write_bytes(encode_tensor(array))
    return path


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    """Read a tensor file."""
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def _check_pnm_header(path: Path) -> Tuple[str, int, int, int]:
    with open(path, "rb") as f:
        head = f.read(512)
    match = _PNM_HEADER.match(head)
    if not match:
        raise FormatError(f"{path}: not a binary PGM/PPM file (malformed header)")
    magic = match.group(1).decode("ascii")
    width, height, maxval = (int(match.group(i)) for i in (2, 3, 4))
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width == 0 or height == 0:
        raise FormatError(f"{path}: empty image {width}x{height}")
    return magic, width, height, maxval


def read_image(path: Union[str, Path]) -> np.ndarray:
    """
    Read a P5/P6 image into an (H, W, C) float64 array in [0, 1].

    Raises:
        FormatError: On malformed headers or maxval other than 255
    """
    path = Path(path)
    magic, width, height, _ = _check_pnm_header(path)
    try:
        with Image.open(path) as img:
            img.load()
            pixels = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise FormatError(f"{path}: {e}") from e

    if pixels.shape[:2] != (height, width):
        raise FormatError(f"{path}: decoded size {pixels.shape[:2]} != header {(height, width)}")
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    expected_channels = 1 if magic == "P5" else 3
    if pixels.shape[2] != expected_channels:
        raise FormatError(f"{path}: expected {expected_channels} channels, got {pixels.shape[2]}")
    return pixels.astype(np.float64) / 255.0


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round v*255 half away from zero to uint8."""
    scaled = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_image(path: Union[str, Path], x: np.ndarray) -> Path:
    """
    Write an (H, W, 1) array as P5 or an (H, W, 3) array as P6.

    Values are clamped to [0, 1] first.
    """
    path = Path(path)
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise FormatError(f"cannot write image of shape {x.shape}; need (H, W, 1) or (H, W, 3)")

    pixels = quantize(x)
    if pixels.shape[2] == 1:
        img = Image.fromarray(pixels[:, :, 0])
    else:
        img = Image.fromarray(pixels)
    img.save(path, format="PPM")
    return path


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """PCG64-backed generator for an unsigned 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def split_streams(
    seed: int, step_seed: Optional[int] = None
) -> Tuple[np.random.Generator, np.random.Generator]:
    """
    Derive the (initialization, per-step) generator pair of a run.

    Both streams are spawned from ``SeedSequence(seed)``; ``step_seed``
    replaces the per-step stream only, leaving the initial draw unchanged.
    """
    init_seq, step_seq = np.random.SeedSequence(int(seed)).spawn(2)
    if step_seed is not None:
        step_seq = np.random.SeedSequence(int(step_seed))
    return (
        np.random.Generator(np.random.PCG64(init_seq)),
        np.random.Generator(np.random.PCG64(step_seq)),
    )
