"""Binary checkpoints: named float arrays with a CRC-protected payload.

Layout (all little-endian):
  magic "RNVP" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u64 step | u64 seed
  per array, sorted by name:
    u16 name length | name utf-8 | u8 ndim | u32 per dim | payload
  u32 CRC32 of everything between the header and the CRC field

Loading verifies the CRC before parsing, so a truncated or corrupted file
never yields partial state.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"RNVP"
VERSION = 1
_HEADER = struct.Struct("<4sIBQQ")
_DTYPE_CODE = {"f32": 0, "f64": 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCrcError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict
    dtype: str
    step: int
    seed: int


def save_checkpoint(path, arrays, dtype="f64", step=0, seed=0):
    if dtype not in _DTYPE_CODE:
        raise ValueError(f"dtype must be f32 or f64, got {dtype!r}")
    dt = _CODE_DTYPE[_DTYPE_CODE[dtype]]
    body = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=dt))
        name_b = name.encode("utf-8")
        body += struct.pack("<H", len(name_b))
        body += name_b
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    blob = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODE[dtype], step, seed)
    blob += bytes(body)
    blob += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size + 4:
        raise CheckpointCrcError(f"{path}: file truncated before the CRC field")
    magic, version, code, step, seed = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPE:
        raise CheckpointError(f"{path}: unknown dtype code {code}")
    body = raw[_HEADER.size:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCrcError(f"{path}: CRC mismatch")
    dt = _CODE_DTYPE[code]
    arrays = {}
    pos = 0
    try:
        while pos < len(body):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arrays[name] = np.frombuffer(body, dtype=dt, count=count,
                                         offset=pos).reshape(shape).copy()
            pos += count * dt.itemsize
    except (struct.error, ValueError) as e:
        raise CheckpointCrcError(f"{path}: body parse failed after CRC pass") from e
    dtype = "f32" if code == 0 else "f64"
    return Checkpoint(arrays=arrays, dtype=dtype, step=int(step), seed=int(seed))
