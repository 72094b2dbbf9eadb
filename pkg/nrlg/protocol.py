"""
Wire codec for external noise predictors.

Messages travel over the child's stdin/stdout. Every message is a frame: a
little-endian u32 byte count followed by the body.

    HANDSHAKE req : "NRLG" | u16 version | u32 T | f64 beta_start | f64 beta_end
                    | u8 ndim | u32 dims[ndim]
    HANDSHAKE resp: "NRLG" | u16 version | u8 status (0 = ok)
    PREDICT req   : u8 2 | u32 t | f32 payload[prod(dims)]
    PREDICT resp  : u8 3 | f32 payload[prod(dims)]
"""

import struct
from dataclasses import dataclass
from typing import BinaryIO, Tuple

import numpy as np

from .errors import ProtocolError, TransportError


MAGIC = b"NRLG"
PROTOCOL_VERSION = 1
MSG_PREDICT_REQUEST = 2
MSG_PREDICT_RESPONSE = 3
STATUS_OK = 0
STATUS_REJECTED = 1

MAX_FRAME_BYTES = 1 << 31

_LENGTH = struct.Struct("<I")
_HELLO = struct.Struct("<4sHIddB")
_HELLO_REPLY = struct.Struct("<4sHB")
_PREDICT_HEAD = struct.Struct("<BI")


@dataclass(frozen=True)
class Handshake:
    """Parameters both sides agree on before the first prediction."""
    version: int
    num_steps: int
    beta_start: float
    beta_end: float
    shape: Tuple[int, ...]


def _read_exact(stream: BinaryIO, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise TransportError(f"stream closed with {remaining} of {count} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> bytes:
    """Read one length-prefixed frame."""
    (length,) = _LENGTH.unpack(_read_exact(stream, _LENGTH.size))
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return _read_exact(stream, length)


def write_frame(stream: BinaryIO, body: bytes) -> None:
    """Write one length-prefixed frame and flush."""
    try:
        stream.write(_LENGTH.pack(len(body)) + body)
        stream.flush()
    except (BrokenPipeError, ValueError, OSError) as e:
        raise TransportError(f"failed to write frame: {e}") from e


def encode_handshake(handshake: Handshake) -> bytes:
    head = _HELLO.pack(MAGIC, handshake.version, handshake.num_steps,
                       handshake.beta_start, handshake.beta_end, len(handshake.shape))
    return head + struct.pack(f"<{len(handshake.shape)}I", *handshake.shape)


def decode_handshake(body: bytes) -> Handshake:
    if len(body) < _HELLO.size:
        raise ProtocolError("handshake request truncated")
    magic, version, T, beta_start, beta_end, ndim = _HELLO.unpack_from(body, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad handshake magic {magic!r}")
    if len(body) != _HELLO.size + 4 * ndim:
        raise ProtocolError("handshake dims length mismatch")
    shape = struct.unpack_from(f"<{ndim}I", body, _HELLO.size)
    return Handshake(version, T, beta_start, beta_end, tuple(int(d) for d in shape))


def encode_handshake_reply(version: int = PROTOCOL_VERSION, status: int = STATUS_OK) -> bytes:
    return _HELLO_REPLY.pack(MAGIC, version, status)


def decode_handshake_reply(body: bytes) -> Tuple[int, int]:
    """Return (version, status) of a handshake response."""
    if len(body) != _HELLO_REPLY.size:
        raise ProtocolError(f"handshake response has {len(body)} bytes, expected {_HELLO_REPLY.size}")
    magic, version, status = _HELLO_REPLY.unpack(body)
    if magic != MAGIC:
        raise ProtocolError(f"bad handshake response magic {magic!r}")
    return version, status


def encode_predict_request(x_t: np.ndarray, t: int) -> bytes:
    payload = np.ascontiguousarray(x_t, dtype="<f4").tobytes()
    return _PREDICT_HEAD.pack(MSG_PREDICT_REQUEST, int(t)) + payload


def decode_predict_request(body: bytes, shape: Tuple[int, ...]) -> Tuple[int, np.ndarray]:
    if not body or body[0] != MSG_PREDICT_REQUEST:
        raise ProtocolError(f"unexpected leading byte {body[:1]!r} in predict request")
    if len(body) < _PREDICT_HEAD.size:
        raise ProtocolError("predict request truncated")
    _, t = _PREDICT_HEAD.unpack_from(body, 0)
    payload = np.frombuffer(body[_PREDICT_HEAD.size:], dtype="<f4")
    if payload.size != int(np.prod(shape)):
        raise ProtocolError(f"predict request carries {payload.size} values, "
                            f"expected {int(np.prod(shape))}")
    return int(t), payload.reshape(shape)


def encode_predict_response(eps: np.ndarray) -> bytes:
    return bytes([MSG_PREDICT_RESPONSE]) + np.ascontiguousarray(eps, dtype="<f4").tobytes()


def decode_predict_response(body: bytes) -> np.ndarray:
    """Return the flat f32 payload; the caller checks the element count."""
    if not body or body[0] != MSG_PREDICT_RESPONSE:
        raise ProtocolError(f"unexpected leading byte {body[:1]!r} in predict response")
    if (len(body) - 1) % 4:
        raise ProtocolError("predict response payload is not a whole number of f32 values")
    return np.frombuffer(body[1:], dtype="<f4")
