"""Surface point extraction from the density field.

Two strategies are provided: the expected-termination point of the opacity
profile (kept as the documented-flawed baseline: on double-layered density
it lands in the vacuum gap between layers) and the opacity-median point,
which sticks to one of the layers because the accumulated opacity is
monotone along the ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateNormal, NoSurface, OutOfBounds
from .grids import DensityGrid, Ray, density_gradient

TAU_HIT = 0.5
STEPS_PER_UNIT = 256
NORMAL_RADIUS_VOXELS = 1.5
NORMAL_SAMPLES = 32
GRAD_EPS = 1e-5


@dataclass
class TransmittanceProfile:
    """Accumulated opacity T at uniformly spaced parameters along a ray.

    T(t) = 1 - exp(-integral of sigma), so T is 0 at entry and approaches 1
    when the ray is fully occluded; non-decreasing by construction.
    """

    ts: np.ndarray
    T: np.ndarray

    @property
    def end_value(self) -> float:
        return float(self.T[-1])

    def value_at(self, t: float) -> float:
        """Piecewise-linear interpolation of the profile at parameter t."""
        return float(np.interp(t, self.ts, self.T))


def default_steps(ray: Ray, steps_per_unit: int = STEPS_PER_UNIT) -> int:
    return max(2, int(np.ceil((ray.t_far - ray.t_near) * steps_per_unit)))


def transmittance_profile(grid: DensityGrid, ray: Ray, n_steps: int | None = None
                          ) -> TransmittanceProfile:
    """Midpoint-rule opacity profile over ``n_steps`` uniform segments."""
    if n_steps is None:
        n_steps = default_steps(ray)
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    depth = _kernels.march_dense(
        grid.sigma, grid.origin, grid.voxel_size,
        ray.origin, ray.direction, ray.t_near, ray.t_far, n_steps,
    )[0]
    ts = np.linspace(ray.t_near, ray.t_far, n_steps + 1)
    return TransmittanceProfile(ts=ts, T=-np.expm1(-depth))


def transmittance_profile_batch(grid: DensityGrid, origins, dirs, tn, tf,
                                n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Profiles for many rays at once: (ts, T), shapes (n, n_steps + 1)."""
    depth = _kernels.march_dense(
        grid.sigma, grid.origin, grid.voxel_size, origins, dirs, tn, tf, n_steps
    )
    tn = np.atleast_1d(np.asarray(tn, dtype=np.float64))
    tf = np.atleast_1d(np.asarray(tf, dtype=np.float64))
    frac = np.linspace(0.0, 1.0, n_steps + 1)
    ts = tn[:, None] + (tf - tn)[:, None] * frac[None, :]
    return ts, -np.expm1(-depth)


def extract_surface_expected(grid: DensityGrid, ray: Ray,
                             n_steps: int | None = None,
                             tau_hit: float = TAU_HIT) -> np.ndarray:
    """Opacity-expectation surface point (baseline strategy).

    x = sum of dT-weighted sample positions / total opacity.  Raises
    NoSurface when total opacity stays below ``tau_hit``.
    """
    prof = transmittance_profile(grid, ray, n_steps)
    total = prof.end_value
    if total < tau_hit:
        raise NoSurface(f"total opacity {total:.4f} < {tau_hit}")
    dT = np.diff(prof.T)
    mids = 0.5 * (prof.ts[:-1] + prof.ts[1:])
    t_hit = float(np.sum(dT * mids) / total)
    return ray.at(t_hit)


def extract_surface_median(grid: DensityGrid, ray: Ray,
                           tol: float | None = None,
                           n_steps: int | None = None,
                           tau_hit: float = TAU_HIT) -> np.ndarray:
    """Opacity-median surface point.

    Solves T(s) = (T(t_near) + T(t_far)) / 2 by lower-bound bisection on the
    piecewise-linear profile; flat (vacuum) plateaus resolve to the smallest
    such s, i.e. the front-most layer.
    """
    prof = transmittance_profile(grid, ray, n_steps)
    if tol is None:
        tol = grid.voxel_size / 16.0
    if prof.end_value < tau_hit:
        raise NoSurface(f"total opacity {prof.end_value:.4f} < {tau_hit}")
    s = _median_param(prof, tol)
    return ray.at(s)


def _median_param(prof: TransmittanceProfile, tol: float) -> float | None:
    target = 0.5 * (prof.T[0] + prof.T[-1])
    if prof.T[-1] <= prof.T[0]:
        return None
    lo = float(prof.ts[0])
    hi = float(prof.ts[-1])
    # lower-bound bisection: converges to the infimum of {s : T(s) >= target}
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if prof.value_at(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def median_params_batch(ts: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Vectorized first-crossing solve of T(s) = (T[0] + T[-1]) / 2.

    Exact on the piecewise-linear profiles (the bisection limit), used by
    the renderer where per-ray bisection would dominate runtime.
    """
    target = 0.5 * (T[:, 0] + T[:, -1])
    n = T.shape[1]
    ge = T >= target[:, None]
    first = np.argmax(ge, axis=1)
    first = np.clip(first, 1, n - 1)
    T0 = np.take_along_axis(T, (first - 1)[:, None], axis=1)[:, 0]
    T1 = np.take_along_axis(T, first[:, None], axis=1)[:, 0]
    t0 = np.take_along_axis(ts, (first - 1)[:, None], axis=1)[:, 0]
    t1 = np.take_along_axis(ts, first[:, None], axis=1)[:, 0]
    dT = T1 - T0
    frac = np.where(dT > 0, (target - T0) / np.where(dT > 0, dT, 1.0), 0.0)
    return t0 + frac * (t1 - t0)


def _ball_points(k: int) -> np.ndarray:
    """Fixed low-discrepancy point set in the unit ball (Halton bases 2,3,5)."""
    def halton(i, b):
        f, r = 1.0, 0.0
        while i > 0:
            f /= b
            r += f * (i % b)
            i //= b
        return r

    pts = np.array(
        [[halton(i + 1, 2), halton(i + 1, 3), halton(i + 1, 5)] for i in range(k)]
    )
    # cube -> ball via radius/direction split
    u = pts[:, 0]
    cos_t = 2.0 * pts[:, 1] - 1.0
    sin_t = np.sqrt(np.clip(1 - cos_t**2, 0, 1))
    phi = 2 * np.pi * pts[:, 2]
    r = u ** (1.0 / 3.0)
    return np.stack(
        [r * sin_t * np.cos(phi), r * sin_t * np.sin(phi), r * cos_t], axis=1
    )


_BALL_CACHE: dict[int, np.ndarray] = {}


def extract_normal(grid: DensityGrid, x_s, radius: float | None = None,
                   k: int = NORMAL_SAMPLES) -> tuple[np.ndarray, bool]:
    """Density-weighted average gradient normal around a surface point.

    Returns (unit normal, erratic flag); the flag marks points whose
    aggregated gradient magnitude fell below GRAD_EPS.  Raises
    DegenerateNormal when every sampled gradient vanishes.
    """
    if radius is None:
        radius = NORMAL_RADIUS_VOXELS * grid.voxel_size
    x_s = np.asarray(x_s, dtype=np.float64)
    if k not in _BALL_CACHE:
        _BALL_CACHE[k] = _ball_points(k)
    pts = x_s + radius * _BALL_CACHE[k]
    pts = np.clip(pts, grid.box_min - 0.5 * grid.voxel_size,
                  grid.box_max + 0.5 * grid.voxel_size)
    try:
        grads = density_gradient(grid, pts)
    except OutOfBounds:
        raise DegenerateNormal("normal query outside grid")
    sig = _kernels.sample_trilinear(grid.sigma, grid.origin, grid.voxel_size, pts)
    g = np.sum(sig[:, None] * grads, axis=0)
    mag = float(np.linalg.norm(g))
    if not np.any(np.linalg.norm(grads, axis=1) > 0):
        raise DegenerateNormal("all sampled density gradients vanish")
    if mag < GRAD_EPS:
        # direction unreliable; fall back to the strongest single gradient
        best = int(np.argmax(np.linalg.norm(grads, axis=1)))
        fallback = -grads[best]
        n = fallback / np.linalg.norm(fallback)
        return n, True
    return -g / mag, False


def extract_normals_batch(grid: DensityGrid, xs: np.ndarray,
                          radius: float | None = None,
                          k: int = NORMAL_SAMPLES
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized extract_normal over many points: (normals, erratic)."""
    if radius is None:
        radius = NORMAL_RADIUS_VOXELS * grid.voxel_size
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if k not in _BALL_CACHE:
        _BALL_CACHE[k] = _ball_points(k)
    offsets = radius * _BALL_CACHE[k]
    pts = (xs[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    pts = np.clip(pts, grid.box_min - 0.5 * grid.voxel_size,
                  grid.box_max + 0.5 * grid.voxel_size)
    h = grid.voxel_size / 2.0
    probes = np.concatenate([
        pts + [h, 0, 0], pts - [h, 0, 0],
        pts + [0, h, 0], pts - [0, h, 0],
        pts + [0, 0, h], pts - [0, 0, h],
    ])
    vals = _kernels.sample_trilinear(grid.sigma, grid.origin, grid.voxel_size,
                                     probes).reshape(6, -1)
    grads = np.stack([
        (vals[0] - vals[1]) / (2 * h),
        (vals[2] - vals[3]) / (2 * h),
        (vals[4] - vals[5]) / (2 * h),
    ], axis=1)
    sig = _kernels.sample_trilinear(grid.sigma, grid.origin, grid.voxel_size, pts)
    g = np.sum((sig[:, None] * grads).reshape(len(xs), k, 3), axis=1)
    mag = np.linalg.norm(g, axis=1)
    erratic = mag < GRAD_EPS
    safe = np.where(mag > 0, mag, 1.0)
    normals = -g / safe[:, None]
    # degenerate rows keep a well-defined unit placeholder
    normals[mag == 0] = np.array([0.0, 0.0, 1.0])
    return normals, erratic
