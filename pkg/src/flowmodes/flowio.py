"""Binary flow-file format (MMFF).

Layout, all little-endian::

    offset  size  field
    0       4     magic b"MMFF"
    4       2     version (u16, = 1)
    6       2     reserved (u16, = 0)
    8       12    F, H, W (u32 each)
    20      N     F*H*W*2 float32 values, [frame][row][col][dx, dy]
    20+N    4     CRC32 of the payload bytes (u32)
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .flowcore import as_flow

MAGIC = b"MMFF"
VERSION = 1
_HEADER = struct.Struct("<4sHHIII")
HEADER_SIZE = _HEADER.size
# Refuse headers that would need more than 2 GiB of payload.
MAX_PAYLOAD_BYTES = 2**31


class FlowFormatError(ValueError):
    """Malformed flow file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_flow(field) -> bytes:
    x = as_flow(field)
    F, H, W, _ = x.shape
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, 0, F, H, W)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_flow(data: bytes) -> np.ndarray:
    if len(data) < HEADER_SIZE:
        raise FlowFormatError("truncated header", len(data))
    magic, version, _reserved, F, H, W = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FlowFormatError("bad magic", 0)
    if version != VERSION:
        raise FlowFormatError(f"unsupported version {version}", 4)
    if min(F, H, W) < 1:
        raise FlowFormatError(f"invalid shape {(F, H, W)}", 8)
    n_bytes = F * H * W * 2 * 4
    if n_bytes > MAX_PAYLOAD_BYTES:
        raise FlowFormatError(f"shape overflow {(F, H, W)}", 8)
    end = HEADER_SIZE + n_bytes
    if len(data) < end + 4:
        raise FlowFormatError(
            f"truncated payload: expected {end + 4} bytes, got {len(data)}", len(data)
        )
    if len(data) > end + 4:
        raise FlowFormatError("trailing bytes after checksum", end + 4)
    payload = data[HEADER_SIZE:end]
    (crc,) = struct.unpack_from("<I", data, end)
    if crc != zlib.crc32(payload):
        raise FlowFormatError("checksum mismatch", end)
    values = np.frombuffer(payload, dtype="<f4").reshape(F, H, W, 2)
    return values.astype(np.float64)


def write_flow(field, path):
    data = encode_flow(field)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)


def read_flow(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        return decode_flow(fh.read())
