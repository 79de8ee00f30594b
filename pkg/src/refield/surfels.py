"""Surfel parameter store: per-point albedo, roughness, normal, and
directional light visibility held in equal-area hemisphere bins.

Attributes live in structure-of-arrays form for vectorized optimization;
``Surfel`` is a lightweight per-index view used by tests and small code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ROUGHNESS_EPS = 1e-3
N_BANDS = 8
N_SECTORS = 8
N_BINS = N_BANDS * N_SECTORS

SFL_MAGIC = b"SFL1"


def tangent_frame(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal tangent pair for each unit normal."""
    n = np.atleast_2d(normals)
    ref = np.where(
        (np.abs(n[:, 0]) < 0.9)[:, None],
        np.array([1.0, 0.0, 0.0]),
        np.array([0.0, 1.0, 0.0]),
    )
    t1 = np.cross(ref, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    if normals.ndim == 1:
        return t1[0], t2[0]
    return t1, t2


def bin_index(normals: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Equal-area hemisphere bin of each direction in its normal's frame.

    Bands split cos(theta) in [0, 1] uniformly (equal solid angle) and
    sectors split azimuth uniformly; directions below the horizon clamp to
    the outermost band.  No interpolation: lookup returns one bin id.
    """
    n = np.atleast_2d(normals)
    w = np.atleast_2d(dirs)
    t1, t2 = tangent_frame(n)
    cos_t = np.clip(np.sum(n * w, axis=1), 0.0, 1.0)
    band = np.minimum(((1.0 - cos_t) * N_BANDS).astype(np.int64), N_BANDS - 1)
    phi = np.arctan2(np.sum(w * t2, axis=1), np.sum(w * t1, axis=1))
    sector = ((phi + np.pi) / (2 * np.pi) * N_SECTORS).astype(np.int64) % N_SECTORS
    idx = band * N_SECTORS + sector
    if np.ndim(normals) == 1 and np.ndim(dirs) == 1:
        return int(idx[0])
    return idx


def bin_directions(normal: np.ndarray) -> np.ndarray:
    """Center direction of every bin in the given normal's frame, (V, 3)."""
    t1, t2 = tangent_frame(normal)
    bands = np.arange(N_BANDS)
    sectors = np.arange(N_SECTORS)
    cos_t = 1.0 - (bands + 0.5) / N_BANDS
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, 1.0))
    phi = -np.pi + (sectors + 0.5) * 2 * np.pi / N_SECTORS
    ct = np.repeat(cos_t, N_SECTORS)
    st = np.repeat(sin_t, N_SECTORS)
    ph = np.tile(phi, N_BANDS)
    return (
        ct[:, None] * normal
        + st[:, None] * (np.cos(ph)[:, None] * t1 + np.sin(ph)[:, None] * t2)
    )


@dataclass
class Surfel:
    position: np.ndarray
    albedo: np.ndarray
    roughness: float
    normal: np.ndarray
    visibility_bins: np.ndarray
    init_normal: np.ndarray
    init_visibility: np.ndarray
    erratic: bool = False


class SurfelCloud:
    """Structure-of-arrays surfel set.

    Mutations go through the ``set_*`` methods, which re-apply the range
    invariants (unit normals, clamped roughness, [0, 1] visibility).
    """

    def __init__(self, positions, albedo, roughness, normals, visibility,
                 init_normals, init_visibility, erratic=None, view_dirs=None):
        self.positions = np.asarray(positions, dtype=np.float64)
        n = len(self.positions)
        self.albedo = np.asarray(albedo, dtype=np.float64).reshape(n, 3)
        self.roughness = np.asarray(roughness, dtype=np.float64).reshape(n)
        self.normals = _unit_rows(np.asarray(normals, dtype=np.float64).reshape(n, 3))
        self.visibility = np.clip(
            np.asarray(visibility, dtype=np.float64).reshape(n, -1), 0.0, 1.0
        )
        self.init_normals = _unit_rows(
            np.asarray(init_normals, dtype=np.float64).reshape(n, 3)
        )
        self.init_visibility = np.clip(
            np.asarray(init_visibility, dtype=np.float64).reshape(n, -1), 0.0, 1.0
        )
        self.erratic = (
            np.zeros(n, dtype=bool)
            if erratic is None
            else np.asarray(erratic, dtype=bool).reshape(n)
        )
        self.view_dirs = (
            None
            if view_dirs is None
            else np.asarray(view_dirs, dtype=np.float64).reshape(n, 3)
        )
        self._clamp()
        self._index = None

    def _clamp(self):
        np.clip(self.albedo, 0.0, 1.0, out=self.albedo)
        np.clip(self.roughness, ROUGHNESS_EPS, 1.0 - ROUGHNESS_EPS,
                out=self.roughness)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_bins(self) -> int:
        return self.visibility.shape[1]

    def surfel(self, i: int) -> Surfel:
        return Surfel(
            position=self.positions[i],
            albedo=self.albedo[i],
            roughness=float(self.roughness[i]),
            normal=self.normals[i],
            visibility_bins=self.visibility[i],
            init_normal=self.init_normals[i],
            init_visibility=self.init_visibility[i],
            erratic=bool(self.erratic[i]),
        )

    def set_normals(self, normals, indices=None):
        normals = _unit_rows(np.atleast_2d(np.asarray(normals, dtype=np.float64)))
        if indices is None:
            self.normals[:] = normals
        else:
            self.normals[indices] = normals

    def set_albedo(self, albedo, indices=None):
        a = np.clip(np.atleast_2d(np.asarray(albedo, dtype=np.float64)), 0.0, 1.0)
        if indices is None:
            self.albedo[:] = a
        else:
            self.albedo[indices] = a

    def set_roughness(self, roughness, indices=None):
        r = np.clip(np.asarray(roughness, dtype=np.float64),
                    ROUGHNESS_EPS, 1.0 - ROUGHNESS_EPS)
        if indices is None:
            self.roughness[:] = r
        else:
            self.roughness[indices] = r

    def set_visibility(self, visibility, indices=None):
        v = np.clip(np.asarray(visibility, dtype=np.float64), 0.0, 1.0)
        if indices is None:
            self.visibility[:] = v
        else:
            self.visibility[indices] = v

    def knn_index(self):
        """Lazily built Euclidean kNN index over surfel positions."""
        if self._index is None:
            from scipy.spatial import cKDTree

            self._index = cKDTree(self.positions)
        return self._index

    def invalidate_index(self):
        self._index = None


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def save_sfl(path, cloud: SurfelCloud) -> None:
    """Binary surfel dump: header then one float32 record per surfel.

    Record field order: position(3), albedo(3), roughness(1), normal(3),
    init_normal(3), view_dir(3), erratic(1), visibility(V), init_visibility(V).
    """
    n = len(cloud)
    v = cloud.n_bins
    view = cloud.view_dirs if cloud.view_dirs is not None else np.zeros((n, 3))
    rec = np.concatenate(
        [
            cloud.positions,
            cloud.albedo,
            cloud.roughness[:, None],
            cloud.normals,
            cloud.init_normals,
            view,
            cloud.erratic[:, None].astype(np.float64),
            cloud.visibility,
            cloud.init_visibility,
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(SFL_MAGIC)
        f.write(struct.pack("<III", 1, n, v))
        f.write(rec.tobytes())


def load_sfl(path) -> SurfelCloud:
    with open(path, "rb") as f:
        if f.read(4) != SFL_MAGIC:
            raise ValueError(f"not an SFL surfel file: {path}")
        version, n, v = struct.unpack("<III", f.read(12))
        if version != 1:
            raise ValueError(f"unsupported SFL version {version}")
        width = 3 + 3 + 1 + 3 + 3 + 3 + 1 + 2 * v
        rec = np.frombuffer(f.read(n * width * 4), dtype="<f4").reshape(n, width)
    rec = rec.astype(np.float64)
    view = rec[:, 13:16]
    return SurfelCloud(
        positions=rec[:, 0:3],
        albedo=rec[:, 3:6],
        roughness=rec[:, 6],
        normals=rec[:, 7:10],
        init_normals=rec[:, 10:13],
        visibility=rec[:, 17:17 + v],
        init_visibility=rec[:, 17 + v:17 + 2 * v],
        erratic=rec[:, 16] > 0.5,
        view_dirs=view if np.any(view) else None,
    )
