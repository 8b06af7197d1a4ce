"""Little-endian tensor container for trained models.

Layout: magic `DSC1`, u32 version (= 1), u32 tensor count, then per tensor:
u16 name length, UTF-8 name, u8 dtype code (0 = float64), u8 rank,
rank x u64 dims, row-major float64 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ModelFormatError, ModelVersionError

MAGIC = b"DSC1"
VERSION = 1
_DTYPE_F64 = 0


def write_tensors(path, tensors: dict) -> None:
    """Write named float64 tensors in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_F64, a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes(order="C"))


def _take(buf: bytes, offset: int, count: int, what: str):
    if offset + count > len(buf):
        raise ModelFormatError(f"truncated model file: expected {what} at byte {offset}")
    return buf[offset:offset + count], offset + count


def read_tensors(path) -> dict:
    """Read a tensor container back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    chunk, off = _take(buf, 0, 4, "magic")
    if chunk != MAGIC:
        raise ModelFormatError(f"bad magic {chunk!r}, expected {MAGIC!r}")
    chunk, off = _take(buf, off, 8, "header")
    version, count = struct.unpack("<II", chunk)
    if version != VERSION:
        raise ModelVersionError(f"unsupported format version {version}, reader supports {VERSION}")
    tensors = {}
    for _ in range(count):
        chunk, off = _take(buf, off, 2, "name length")
        (name_len,) = struct.unpack("<H", chunk)
        chunk, off = _take(buf, off, name_len, "tensor name")
        name = chunk.decode("utf-8")
        chunk, off = _take(buf, off, 2, "dtype/rank")
        dtype, rank = struct.unpack("<BB", chunk)
        if dtype != _DTYPE_F64:
            raise ModelFormatError(f"tensor {name!r}: unknown dtype code {dtype}")
        chunk, off = _take(buf, off, 8 * rank, "dims")
        dims = struct.unpack(f"<{rank}Q", chunk) if rank else ()
        n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8 * 1
        if rank == 0:
            dims = ()
            n_bytes = 8
        chunk, off = _take(buf, off, n_bytes, f"payload of {name!r}")
        arr = np.frombuffer(chunk, dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = arr
    if off != len(buf):
        raise ModelFormatError(f"{len(buf) - off} trailing bytes after last tensor")
    return tensors
