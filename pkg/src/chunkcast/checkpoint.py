"""Flat named-tensor checkpoint files.

Layout (all integers little-endian, documented in docs/formats.md):

    magic   4 bytes  b"NTC1"
    count   uint32   number of entries
    entry*  repeated, sorted by name:
        name_len uint16, name utf-8 bytes
        dtype    uint8   0 = float32, 1 = float64
        ndim     uint8
        dims     uint32 * ndim
        payload  little-endian floats, C order

Sorting by name makes the byte stream a deterministic function of the
tensor contents.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTC1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(named))
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}; not a checkpoint file")
    (count,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", blob, offset)
        offset += 2
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        dtype = _DTYPES[code]
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(dims)
        offset += n * dtype.itemsize
        out[name] = arr.astype(dtype.newbyteorder("="))
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out
