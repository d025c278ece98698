"""Little-endian binary checkpoints of named float64 arrays.

Layout::

    b"VFLC"                       magic
    u32 version                   currently 1
    u32 n_arrays
    repeated n_arrays times:
        u16 name_len, name bytes (UTF-8)
        u32 ndim, ndim x u32 dims
        prod(dims) x f64 data, row-major
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

MAGIC = b"VFLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    version, n = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(n):
        (name_len,) = take("<H")
        name = bytes(take(f"<{name_len}s")[0]).decode("utf-8")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    return out
