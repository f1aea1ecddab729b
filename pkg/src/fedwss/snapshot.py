"""Binary parameter snapshots.

Container layout (all integers little-endian):
    magic   b"FWS1"
    u32     entry count
per entry:
    u16     name length, then the UTF-8 name
    u8      ndim, then ndim x u32 extents
    f64[]   row-major little-endian values

Used for checkpoints and for moving parameters between federation tasks;
round-trips float64 arrays exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FWS1"


class SnapshotError(ValueError):
    pass


def dump_params(params: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(params))
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc)) + enc
        out += struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.astype("<f8", copy=False).tobytes()
    return bytes(out)


def load_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise SnapshotError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (count,) = struct.unpack_from("<I", blob, 4)
    off = 8
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        params[name] = arr.astype(np.float64)
    if off != len(blob):
        raise SnapshotError(f"trailing bytes: {len(blob) - off}")
    return params


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_params(params))


def read_params(path: str | Path) -> dict[str, np.ndarray]:
    return load_params(Path(path).read_bytes())
