"""Portable float map (PFM) read/write.

Images are handled as float32 arrays with row 0 at the top; the PFM scale
field is written negative (little-endian) as usual.
"""

from __future__ import annotations

import numpy as np


def save_pfm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf"
        data = image
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        data = image
    else:
        raise ValueError("PFM supports (H, W) or (H, W, 3) images")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    if channels == 3:
        img = data.reshape(h, w, 3)
    else:
        img = data.reshape(h, w)
    return np.flipud(img).astype(np.float32).copy()
