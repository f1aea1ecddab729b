"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a [H,W] uint8 array (or float in [0,1], scaled to 0..255)."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + a.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        parts.append(blob[start:pos])
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"unsupported PGM header {parts!r}")
    w, h = int(parts[1]), int(parts[2])
    pos += 1
    return np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)
