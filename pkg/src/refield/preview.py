"""LDR preview output: gamma tone map plus a minimal dependency-free PNG
writer (8-bit RGB, one IDAT chunk)."""

from __future__ import annotations

import struct
import zlib

import numpy as np


def tonemap(hdr: np.ndarray, exposure: float = 1.0,
            gamma: float = 2.2) -> np.ndarray:
    img = np.clip(np.asarray(hdr, dtype=np.float64) * exposure, 0.0, 1.0)
    return (img ** (1.0 / gamma) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, rgb8: np.ndarray) -> None:
    img = np.asarray(rgb8, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape[:2]

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", header))
        f.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        f.write(chunk(b"IEND", b""))
