"""Binary tensor serialization (DSTN format).

Layout: magic ``DSTN``, version u8, rank u8, dims as u32 little-endian, then
the payload row-major little-endian.  Version 1 stores float32 (dumps, corpus
tracklets, embeddings); version 2 stores float64 and exists so checkpoints can
round-trip double-precision training state bitwise.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"DSTN"
VERSION_F32 = 1
VERSION_F64 = 2
_MAX_RANK = 8

_PAYLOAD_DTYPES = {VERSION_F32: "<f4", VERSION_F64: "<f8"}


def dump_tensor(array, fp, version: int = VERSION_F32) -> None:
    """Write one array to a binary file object."""
    if version not in _PAYLOAD_DTYPES:
        raise ValueError(f"unknown DSTN version {version}")
    # np.ascontiguousarray would promote 0-d arrays to 1-d; asarray keeps rank
    arr = np.asarray(array, order="C")
    if arr.ndim > _MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds DSTN maximum {_MAX_RANK}")
    fp.write(MAGIC)
    fp.write(struct.pack("<BB", version, arr.ndim))
    for dim in arr.shape:
        fp.write(struct.pack("<I", dim))
    fp.write(arr.astype(_PAYLOAD_DTYPES[version], copy=False).tobytes())


def load_tensor(fp) -> np.ndarray:
    """Read one array from a binary file object."""
    head = fp.read(4)
    if head != MAGIC:
        raise ValueError(f"not a DSTN stream (magic {head!r})")
    version, rank = struct.unpack("<BB", fp.read(2))
    if version not in _PAYLOAD_DTYPES:
        raise ValueError(f"unknown DSTN version {version}")
    if rank > _MAX_RANK:
        raise ValueError(f"rank {rank} exceeds DSTN maximum {_MAX_RANK}")
    dims = struct.unpack(f"<{rank}I", fp.read(4 * rank)) if rank else ()
    dtype = np.dtype(_PAYLOAD_DTYPES[version])
    count = int(np.prod(dims)) if dims else 1
    payload = fp.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("truncated DSTN payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_dstn(path, array, version: int = VERSION_F32) -> None:
    with open(path, "wb") as fp:
        dump_tensor(array, fp, version=version)


def read_dstn(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return load_tensor(fp)


def dstn_bytes(array, version: int = VERSION_F32) -> bytes:
    buf = io.BytesIO()
    dump_tensor(array, buf, version=version)
    return buf.getvalue()


def dstn_from_bytes(blob: bytes) -> np.ndarray:
    return load_tensor(io.BytesIO(blob))
