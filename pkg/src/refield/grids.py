"""Voxel density grid: storage, interpolation, gradients, RFV1 file I/O.

The grid covers the axis-aligned world box ``[origin, origin + dims * voxel_size]``
with density samples at voxel centers.  Interpolation is trilinear with
clamp-to-edge inside the box; the density is defined as exactly 0 outside
the box (vacuum beyond the scene bounds).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import OutOfBounds

RFV1_MAGIC = b"RFV1\x00\x00\x00\x00"


@dataclass(frozen=True)
class DensityGrid:
    """Dense non-negative density field on a regular voxel grid.

    sigma has shape (nx, ny, nz), float32; immutable after construction.
    """

    sigma: np.ndarray
    origin: np.ndarray
    voxel_size: float

    def __post_init__(self):
        sig = np.ascontiguousarray(self.sigma, dtype=np.float32)
        if sig.ndim != 3 or min(sig.shape) < 2:
            raise ValueError("sigma must be 3-D with every dim >= 2")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if np.any(sig < 0):
            raise ValueError("density values must be non-negative")
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(
            self, "origin", np.asarray(self.origin, dtype=np.float64).copy()
        )
        self.sigma.flags.writeable = False
        self.origin.flags.writeable = False

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.sigma.shape

    @property
    def box_min(self) -> np.ndarray:
        return self.origin

    @property
    def box_max(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.voxel_size


@dataclass
class Ray:
    """Half-open ray segment with unit direction and marching bounds."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(d)
        if norm == 0:
            raise ValueError("ray direction must be nonzero")
        self.direction = d / norm
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def sample_density(grid: DensityGrid, x) -> float | np.ndarray:
    """Trilinear density at world position(s) ``x``; 0 outside the grid box."""
    return _kernels.sample_trilinear(grid.sigma, grid.origin, grid.voxel_size, x)


def density_gradient(grid: DensityGrid, x) -> np.ndarray:
    """Central finite difference of the trilinear field, step voxel_size / 2.

    Raises OutOfBounds if ``x`` leaves the grid box inflated by one voxel.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    pts = np.atleast_2d(x)
    pad = grid.voxel_size
    if np.any(pts < grid.box_min - pad) or np.any(pts > grid.box_max + pad):
        raise OutOfBounds("gradient query outside inflated grid bounds")
    h = grid.voxel_size / 2.0
    offsets = np.zeros((6, 3))
    offsets[0, 0] = h
    offsets[1, 0] = -h
    offsets[2, 1] = h
    offsets[3, 1] = -h
    offsets[4, 2] = h
    offsets[5, 2] = -h
    probes = (pts[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    vals = _kernels.sample_trilinear(
        grid.sigma, grid.origin, grid.voxel_size, probes
    ).reshape(-1, 6)
    grad = np.stack(
        [
            (vals[:, 0] - vals[:, 1]) / (2 * h),
            (vals[:, 2] - vals[:, 3]) / (2 * h),
            (vals[:, 4] - vals[:, 5]) / (2 * h),
        ],
        axis=1,
    )
    return grad[0] if squeeze else grad


def ray_box_span(grid: DensityGrid, origin, direction) -> tuple[float, float] | None:
    """Parameter interval where the ray overlaps the grid box, or None."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t0, t1 = -np.inf, np.inf
    for ax in range(3):
        if abs(direction[ax]) > 1e-300:
            a = (grid.box_min[ax] - origin[ax]) / direction[ax]
            b = (grid.box_max[ax] - origin[ax]) / direction[ax]
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
        elif not (grid.box_min[ax] <= origin[ax] <= grid.box_max[ax]):
            return None
    if t1 <= t0:
        return None
    return float(t0), float(t1)


def ray_box_span_batch(grid: DensityGrid, origins, dirs
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward overlap of many rays with the grid box.

    Returns (t_near, t_far, valid) with t_near clamped to 0.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(o)
    t0 = np.zeros(n)
    t1 = np.full(n, np.inf)
    for ax in range(3):
        b = d[:, ax]
        p = o[:, ax]
        moving = np.abs(b) > 1e-300
        safe = np.where(moving, b, 1.0)
        ta = (grid.box_min[ax] - p) / safe
        tb = (grid.box_max[ax] - p) / safe
        lo_t = np.minimum(ta, tb)
        hi_t = np.maximum(ta, tb)
        t0 = np.where(moving, np.maximum(t0, lo_t), t0)
        t1 = np.where(moving, np.minimum(t1, hi_t), t1)
        off = ~moving & ((p < grid.box_min[ax]) | (p > grid.box_max[ax]))
        t1 = np.where(off, -np.inf, t1)
    valid = t1 > t0
    return t0, np.where(valid, t1, t0 + 1.0), valid


def save_rfv(path, grid: DensityGrid) -> None:
    """Write the RFV1 binary grid format (see docs/formats.md)."""
    nx, ny, nz = grid.dims
    with open(path, "wb") as f:
        f.write(RFV1_MAGIC)
        f.write(struct.pack("<7sx", b"v1"))  # reserved: pads header to 16 bytes
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<3f", *grid.origin.astype(np.float32)))
        f.write(struct.pack("<f", np.float32(grid.voxel_size)))
        # x-fastest order: flatten as (z, y, x) C-order
        f.write(grid.sigma.transpose(2, 1, 0).astype("<f4").tobytes())


def load_rfv(path) -> DensityGrid:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != RFV1_MAGIC:
            raise ValueError(f"not an RFV1 grid file: {path}")
        f.read(8)  # reserved
        nx, ny, nz = struct.unpack("<3I", f.read(12))
        origin = np.array(struct.unpack("<3f", f.read(12)), dtype=np.float64)
        (voxel_size,) = struct.unpack("<f", f.read(4))
        data = np.frombuffer(f.read(nx * ny * nz * 4), dtype="<f4")
    sigma = data.reshape(nz, ny, nx).transpose(2, 1, 0)
    return DensityGrid(sigma=sigma, origin=origin, voxel_size=float(voxel_size))
