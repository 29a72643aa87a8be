"""Binary frame codec.

Layout, little-endian::

    "HPV1" | type u8 | inference_id u32 | layer_id u32 | range_start u32 |
    range_end u32 | ndim u8 | dims u32 * ndim | payload_len u64 | payload | crc32 u32

The CRC covers everything before it.  The raw model input travels with
``layer_id = 0xFFFFFFFF``.
"""
from __future__ import annotations

import enum
import json
import socket
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..graph import INPUT_ID

MAGIC = b"HPV1"
PROTOCOL_VERSION = 1
RAW_INPUT_LAYER = 0xFFFFFFFF
MAX_PAYLOAD = 1 << 31

_HEAD = struct.Struct("<4sBIIIIB")
_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


class MsgType(enum.IntEnum):
    HELLO = 1
    MODEL = 2
    PROFILE_INFO = 3
    PLANBOOK = 4
    START_INFERENCE = 5
    FRAGMENT = 6
    RESULT = 7
    ERROR = 8
    BYE = 9


class WireError(ValueError):
    """Malformed or corrupted frame."""


class ConnectionClosed(ConnectionError):
    pass


@dataclass(frozen=True)
class Frame:
    type: MsgType
    inference_id: int = 0
    layer_id: int = 0
    range_start: int = 0
    range_end: int = 0
    dims: tuple[int, ...] = ()
    payload: bytes = b""

    @property
    def source_layer(self) -> int:
        return INPUT_ID if self.layer_id == RAW_INPUT_LAYER else self.layer_id

    def tensor(self) -> np.ndarray:
        count = 1
        for d in self.dims:
            count *= d
        if len(self.payload) != 4 * count:
            raise WireError(f"payload of {len(self.payload)} bytes does not match dims {self.dims}")
        return np.frombuffer(self.payload, dtype="<f4").astype(np.float32).reshape(self.dims)

    def json(self) -> dict:
        try:
            return json.loads(self.payload.decode("utf-8")) if self.payload else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WireError(f"bad JSON payload in {self.type.name}: {exc}") from None

    def text(self) -> str:
        """Decompress a MODEL / PLANBOOK / PROFILE_INFO payload."""
        try:
            return zlib.decompress(self.payload).decode("utf-8")
        except (zlib.error, UnicodeDecodeError) as exc:
            raise WireError(f"bad compressed payload in {self.type.name}: {exc}") from None


def layer_field(layer_id: int) -> int:
    return RAW_INPUT_LAYER if layer_id == INPUT_ID else layer_id


def fragment_frame(kind: MsgType, inference_id: int, layer_id: int, start: int, stop: int,
                   data: np.ndarray) -> Frame:
    arr = np.ascontiguousarray(data, dtype="<f4")
    return Frame(kind, inference_id, layer_field(layer_id), start, stop, tuple(arr.shape), arr.tobytes())


def json_frame(kind: MsgType, doc: dict, inference_id: int = 0, layer_id: int = 0) -> Frame:
    body = json.dumps(doc, sort_keys=True).encode("utf-8")
    return Frame(kind, inference_id, layer_id, payload=body)


def text_frame(kind: MsgType, text: str) -> Frame:
    return Frame(kind, payload=zlib.compress(text.encode("utf-8"), 6))


def encode(frame: Frame) -> bytes:
    if len(frame.dims) > 255:
        raise WireError("too many dimensions")
    head = _HEAD.pack(MAGIC, int(frame.type), frame.inference_id, frame.layer_id,
                      frame.range_start, frame.range_end, len(frame.dims))
    dims = struct.pack(f"<{len(frame.dims)}I", *frame.dims)
    body = head + dims + _LEN.pack(len(frame.payload)) + frame.payload
    return body + _CRC.pack(zlib.crc32(body))


def header_size(ndim: int) -> int:
    """Bytes a frame adds on top of its payload."""
    return _HEAD.size + 4 * ndim + _LEN.size + _CRC.size


def decode(buf: bytes) -> Frame:
    """Decode exactly one frame from ``buf``."""
    frame, used = _decode_prefix(buf)
    if frame is None:
        raise WireError("truncated frame")
    if used != len(buf):
        raise WireError(f"{len(buf) - used} trailing bytes after frame")
    return frame


def _decode_prefix(buf: bytes) -> tuple[Frame | None, int]:
    if len(buf) < _HEAD.size:
        return None, 0
    magic, mtype, inf, layer, lo, hi, ndim = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    pos = _HEAD.size
    if len(buf) < pos + 4 * ndim + _LEN.size:
        return None, 0
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    (plen,) = _LEN.unpack_from(buf, pos)
    pos += _LEN.size
    if plen > MAX_PAYLOAD:
        raise WireError(f"payload length {plen} exceeds limit")
    end = pos + plen + _CRC.size
    if len(buf) < end:
        return None, 0
    (crc,) = _CRC.unpack_from(buf, pos + plen)
    if zlib.crc32(buf[: pos + plen]) != crc:
        raise WireError("CRC mismatch")
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise WireError(f"unknown message type {mtype}") from None
    if hi < lo:
        raise WireError(f"inverted range [{lo},{hi})")
    return Frame(kind, inf, layer, lo, hi, tuple(dims), bytes(buf[pos: pos + plen])), end


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionClosed("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Frame:
    head = _recv_exact(sock, _HEAD.size)
    magic = head[:4]
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    ndim = head[-1]
    rest = _recv_exact(sock, 4 * ndim + _LEN.size)
    (plen,) = _LEN.unpack_from(rest, 4 * ndim)
    if plen > MAX_PAYLOAD:
        raise WireError(f"payload length {plen} exceeds limit")
    tail = _recv_exact(sock, plen + _CRC.size)
    return decode(head + rest + tail)


def write_frame(sock: socket.socket, frame: Frame) -> int:
    data = encode(frame)
    sock.sendall(data)
    return len(data)
