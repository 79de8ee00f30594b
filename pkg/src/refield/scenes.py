"""Synthetic fixture factory: implicit-primitive scenes baked to density
grids, analytic ground-truth attribute oracles, and a direct-illumination
reference renderer used to produce the multi-view training images.

Baked density is a Gaussian shell around each primitive surface (soft,
opaque at normal incidence), emulating the soft surfaces a trained volume
produces.  The reference renderer intersects primitives analytically,
shades with the same BRDF module at high sample counts, and uses binary
shadow rays; no inter-reflections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import brdf as _brdf
from . import envmap as _env
from .grids import DensityGrid
from .render import Camera

SHELL_VOXELS = 0.75
SIGMA_PEAK = 150.0


# ---------------------------------------------------------------------------
# implicit shapes


@dataclass
class Primitive:
    shape: str                       # sphere | plane | box
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.5              # sphere
    normal_axis: np.ndarray = field(default_factory=lambda: np.array([0., 0., 1.]))
    offset: float = 0.0              # plane: n . x = offset
    half_extent: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    albedo: object = (0.5, 0.5, 0.5)  # rgb tuple or texture spec dict
    roughness: float = 0.6
    specular_f0: float = _brdf.SPECULAR_F0
    bake_ripple_amp: float = 0.0     # bake-only geometry noise
    bake_ripple_freq: float = 8.0

    def sdf(self, pts: np.ndarray, baked: bool = False) -> np.ndarray:
        p = np.atleast_2d(pts)
        if self.shape == "sphere":
            d = np.linalg.norm(p - self.center, axis=1) - self.radius
        elif self.shape == "plane":
            d = p @ np.asarray(self.normal_axis, dtype=np.float64) - self.offset
        elif self.shape == "box":
            q = np.abs(p - self.center) - self.half_extent
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            d = outside + inside
        else:
            raise ValueError(f"unknown shape {self.shape!r}")
        if baked and self.bake_ripple_amp > 0.0:
            f = self.bake_ripple_freq
            d = d + self.bake_ripple_amp * (
                np.sin(f * p[:, 0]) * np.sin(f * p[:, 1]) * np.cos(f * p[:, 2]))
        return d

    def sdf_gradient(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts)
        if self.shape == "sphere":
            v = p - self.center
            return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True),
                                  1e-12)
        if self.shape == "plane":
            n = np.asarray(self.normal_axis, dtype=np.float64)
            return np.broadcast_to(n / np.linalg.norm(n), p.shape).copy()
        # box: finite differences of the exact sdf
        h = 1e-5
        g = np.empty_like(p)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = h
            g[:, ax] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)

    def albedo_at(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts)
        a = self.albedo
        if isinstance(a, dict):
            return texture_albedo(a, p)
        return np.broadcast_to(np.asarray(a, dtype=np.float64), (len(p), 3)).copy()


def texture_albedo(spec: dict, pts: np.ndarray) -> np.ndarray:
    """Procedural albedo textures used by the fixtures."""
    kind = spec["texture"]
    p = np.atleast_2d(pts)
    if kind == "bands":
        # smooth blend of three colors along an axis
        axis = int(spec.get("axis", 2))
        freq = float(spec.get("frequency", 2.0))
        c = np.asarray(spec.get("colors", [[0.8, 0.25, 0.2],
                                           [0.2, 0.6, 0.8],
                                           [0.75, 0.7, 0.25]]))
        t = 0.5 + 0.5 * np.sin(freq * np.pi * p[:, axis])
        s = 0.5 + 0.5 * np.sin(freq * np.pi * p[:, (axis + 1) % 3] + 1.3)
        out = (t[:, None] * c[0] + (1 - t)[:, None] * c[1])
        return 0.7 * out + 0.3 * s[:, None] * c[2] + 0.05
    if kind == "two_tone":
        axis = int(spec.get("axis", 0))
        thr = float(spec.get("threshold", 0.0))
        c0 = np.asarray(spec.get("color0", [0.85, 0.3, 0.2]))
        c1 = np.asarray(spec.get("color1", [0.2, 0.4, 0.85]))
        sel = p[:, axis] > thr
        return np.where(sel[:, None], c0, c1)
    if kind == "checker":
        scale = float(spec.get("scale", 4.0))
        c0 = np.asarray(spec.get("color0", [0.9, 0.9, 0.9]))
        c1 = np.asarray(spec.get("color1", [0.2, 0.2, 0.2]))
        q = np.floor(p * scale).astype(np.int64).sum(axis=1) % 2
        return np.where((q == 0)[:, None], c0, c1)
    raise ValueError(f"unknown texture {kind!r}")


def build_env(spec: dict, resolution: int = _env.DEFAULT_RESOLUTION
              ) -> _env.EnvCubeMap:
    """Environment builders for fixture scenes."""
    kind = spec.get("type", "constant")
    if kind == "constant":
        return _env.EnvCubeMap.constant(spec.get("value", 1.0), resolution)
    if kind == "gradient":
        # bright toward a direction, dim opposite; smooth everywhere
        d = np.asarray(spec.get("direction", [0.4, -0.8, 0.3]), dtype=np.float64)
        d /= np.linalg.norm(d)
        hi = np.asarray(spec.get("high", [1.4, 1.3, 1.1]))
        lo = np.asarray(spec.get("low", [0.15, 0.18, 0.25]))

        def fn(dirs):
            t = 0.5 + 0.5 * (dirs @ d)
            return lo + (hi - lo) * t[:, None] ** 2

        return _env.EnvCubeMap.from_function(fn, resolution)
    if kind == "sky_sun":
        sun_dir = np.asarray(spec.get("sun_direction", [0.5, -0.7, 0.4]),
                             dtype=np.float64)
        sun_dir /= np.linalg.norm(sun_dir)
        sky = np.asarray(spec.get("sky", [0.3, 0.4, 0.55]))
        sun = np.asarray(spec.get("sun", [3.0, 2.8, 2.4]))
        width = float(spec.get("sun_width", 0.15))

        def fn(dirs):
            c = np.clip(dirs @ sun_dir, -1.0, 1.0)
            blob = np.exp((c - 1.0) / width)
            up = 0.5 + 0.5 * (-dirs[:, 1])
            return sky * (0.4 + 0.6 * up[:, None]) + sun * blob[:, None]

        return _env.EnvCubeMap.from_function(fn, resolution)
    raise ValueError(f"unknown env type {kind!r}")


# ---------------------------------------------------------------------------
# scene description


@dataclass
class SceneDesc:
    primitives: list[Primitive]
    env_spec: dict = field(default_factory=lambda: {"type": "constant",
                                                    "value": 1.0})
    bounds_min: np.ndarray = field(default_factory=lambda: -np.ones(3))
    bounds_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    shell_voxels: float = SHELL_VOXELS
    sigma_peak: float = SIGMA_PEAK
    env_resolution: int = _env.DEFAULT_RESOLUTION

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)

    def gt_env(self) -> _env.EnvCubeMap:
        return build_env(self.env_spec, self.env_resolution)

    # analytic ground-truth oracle -----------------------------------------

    def nearest_primitive(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts)
        d = np.stack([np.abs(pr.sdf(p)) for pr in self.primitives], axis=1)
        return np.argmin(d, axis=1)

    def gt_normal(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts)
        which = self.nearest_primitive(p)
        out = np.empty_like(p)
        for i, pr in enumerate(self.primitives):
            sel = which == i
            if sel.any():
                out[sel] = pr.sdf_gradient(p[sel])
        return out

    def gt_albedo(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts)
        which = self.nearest_primitive(p)
        out = np.empty((len(p), 3))
        for i, pr in enumerate(self.primitives):
            sel = which == i
            if sel.any():
                out[sel] = pr.albedo_at(p[sel])
        return out

    def gt_roughness(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts)
        which = self.nearest_primitive(p)
        out = np.empty(len(p))
        for i, pr in enumerate(self.primitives):
            out[which == i] = pr.roughness
        return out

    def gt_specular_f0(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts)
        which = self.nearest_primitive(p)
        out = np.empty(len(p))
        for i, pr in enumerate(self.primitives):
            out[which == i] = pr.specular_f0
        return out


def bake_scene(desc: SceneDesc, dims) -> DensityGrid:
    """Bake the Gaussian surface shell onto a voxel grid."""
    if np.isscalar(dims):
        dims = (int(dims),) * 3
    dims = tuple(int(d) for d in dims)
    extent = desc.bounds_max - desc.bounds_min
    voxel = float(extent[0] / dims[0])
    shell = desc.shell_voxels * voxel
    xs = [desc.bounds_min[ax] + (np.arange(dims[ax]) + 0.5) * voxel
          for ax in range(3)]
    gx, gy, gz = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    dist = np.full(len(pts), np.inf)
    for pr in desc.primitives:
        dist = np.minimum(dist, np.abs(pr.sdf(pts, baked=True)))
    sigma = desc.sigma_peak * np.exp(-(dist**2) / (2.0 * shell * shell))
    sigma[sigma < 1e-6] = 0.0
    return DensityGrid(sigma=sigma.reshape(dims).astype(np.float32),
                       origin=desc.bounds_min, voxel_size=voxel)


# ---------------------------------------------------------------------------
# analytic intersection + reference renderer


def intersect(desc: SceneDesc, origins: np.ndarray, dirs: np.ndarray,
              t_max: float = np.inf):
    """Closest analytic hit: (t, primitive index, hit mask)."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    n = len(o)
    best_t = np.full(n, np.inf)
    best_p = np.full(n, -1, dtype=np.int64)
    for i, pr in enumerate(desc.primitives):
        t = _intersect_one(pr, o, d)
        better = (t > 1e-9) & (t < best_t) & (t < t_max)
        best_t = np.where(better, t, best_t)
        best_p = np.where(better, i, best_p)
    return best_t, best_p, best_p >= 0


def _intersect_one(pr: Primitive, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    n = len(o)
    if pr.shape == "sphere":
        oc = o - pr.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - pr.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where(ok & (t > 1e-9), t, np.inf)
    if pr.shape == "plane":
        nrm = np.asarray(pr.normal_axis, dtype=np.float64)
        nrm = nrm / np.linalg.norm(nrm)
        denom = d @ nrm
        t = (pr.offset - o @ nrm) / np.where(np.abs(denom) > 1e-12, denom, 1.0)
        return np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
    if pr.shape == "box":
        lo = pr.center - pr.half_extent
        hi = pr.center + pr.half_extent
        t0 = np.full(n, -np.inf)
        t1 = np.full(n, np.inf)
        for ax in range(3):
            moving = np.abs(d[:, ax]) > 1e-12
            safe = np.where(moving, d[:, ax], 1.0)
            ta = (lo[ax] - o[:, ax]) / safe
            tb = (hi[ax] - o[:, ax]) / safe
            t0 = np.where(moving, np.maximum(t0, np.minimum(ta, tb)), t0)
            t1 = np.where(moving, np.minimum(t1, np.maximum(ta, tb)), t1)
            off = ~moving & ((o[:, ax] < lo[ax]) | (o[:, ax] > hi[ax]))
            t1 = np.where(off, -np.inf, t1)
        hit = t1 >= np.maximum(t0, 1e-9)
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where(hit & (t > 1e-9), t, np.inf)
    raise ValueError(f"unknown shape {pr.shape!r}")


def render_reference(desc: SceneDesc, camera: Camera, n_samples: int = 768,
                     seed: int = 0, env: _env.EnvCubeMap | None = None,
                     spec_fraction: float = 0.6667):
    """Direct-illumination oracle render.

    Returns (hdr image (H, W, 3), hit mask (H, W)).  Shadow rays are binary
    analytic occlusion tests; shading reuses the BRDF module with MIS at
    high sample count; environment lookups at base mip level.
    """
    if env is None:
        env = desc.gt_env()
    h, w = camera.height, camera.width
    origins, dirs = camera.rays()
    t, prim, hit = intersect(desc, origins, dirs)
    image = np.zeros((h * w, 3))

    idx = np.nonzero(hit)[0]
    n_spec = max(1, int(round(n_samples * spec_fraction)))
    n_diff = max(1, n_samples - n_spec)
    chunk = 1024
    for c0 in range(0, len(idx), chunk):
        sel = idx[c0:c0 + chunk]
        x = origins[sel] + t[sel, None] * dirs[sel]
        nrm = desc.gt_normal(x)
        # orient toward the camera
        flip = np.sum(nrm * dirs[sel], axis=1) > 0
        nrm[flip] *= -1.0
        alb = desc.gt_albedo(x)
        rough = desc.gt_roughness(x)
        wo = -dirs[sel]

        u_spec = np.empty((len(sel), n_spec, 2))
        u_diff = np.empty((len(sel), n_diff, 2))
        for row, px in enumerate(sel):
            prng = np.random.default_rng([seed, 314159, int(px)])
            u_spec[row] = prng.random((n_spec, 2))
            u_diff[row] = prng.random((n_diff, 2))
        dset = _brdf.sample_direction_batch(
            rough, nrm, wo, None, n_spec, n_diff,
            u_spec=u_spec.reshape(-1, 2), u_diff=u_diff.reshape(-1, 2))
        pi = dset.point
        # per-lobe estimation: each sample set integrates its own BRDF term
        # (zero variance for the Lambert term under cosine sampling)
        weights = _brdf.estimator_weights(dset, rough, nrm, wo, mis=False)
        f0 = np.repeat(desc.gt_specular_f0(x)[:, None], 3, axis=1)[pi]
        f_diff, f_spec = _brdf.eval_brdf_parts(
            alb[pi], rough[pi], f0, nrm[pi], dset.dirs, wo[pi])
        f_total = np.where((dset.lobe == 0)[:, None], f_spec, f_diff)
        cos = np.maximum(np.sum(nrm[pi] * dset.dirs, axis=1), 0.0)
        # binary analytic shadow rays
        offset_pts = x[pi] + 1e-5 * nrm[pi]
        _, _, blocked = intersect(desc, offset_pts, dset.dirs)
        vis = (~blocked).astype(np.float64)
        env_rgb = _env.sample_env(env, dset.dirs, 0.0)
        contrib = weights[:, None] * f_total * env_rgb * (vis * cos)[:, None]
        rad = np.zeros((len(sel), 3))
        np.add.at(rad, pi, contrib)
        image[sel] = rad
    return image.reshape(h, w, 3), hit.reshape(h, w)


# ---------------------------------------------------------------------------
# cameras and the shipped fixture suite


def ring_cameras(n: int, radius: float = 2.6, elevations=(0.35, -0.15),
                 look_at=(0.0, 0.0, 0.0), resolution: int = 64,
                 fov_deg: float = 42.0, phase: float = 0.0) -> list[Camera]:
    """n cameras on rings around the target, evenly spread in azimuth."""
    cams = []
    look_at = np.asarray(look_at, dtype=np.float64)
    for i in range(n):
        elev = elevations[i % len(elevations)]
        az = 2 * np.pi * i / n + phase
        pos = look_at + radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(elev), np.sin(az) * np.cos(elev)])
        cams.append(look_at_camera(pos, look_at, resolution, fov_deg))
    return cams


def look_at_camera(position, target, resolution: int = 64,
                   fov_deg: float = 42.0) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    fwd /= np.linalg.norm(fwd)
    world_up = np.array([0.0, 1.0, 0.0])
    if abs(fwd @ world_up) > 0.99:
        world_up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, world_up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = position
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    return Camera(pose=pose, fx=f, fy=f, cx=resolution / 2,
                  cy=resolution / 2, width=resolution, height=resolution)


def fixture_diffuse_sphere(**kw) -> SceneDesc:
    return SceneDesc(
        primitives=[Primitive(shape="sphere", radius=0.72,
                              albedo=(0.5, 0.5, 0.5), roughness=0.7)],
        env_spec={"type": "constant", "value": 1.0}, **kw)


def fixture_textured_sphere(**kw) -> SceneDesc:
    return SceneDesc(
        primitives=[Primitive(
            shape="sphere", radius=0.72,
            albedo={"texture": "bands", "axis": 1, "frequency": 1.5},
            roughness=0.65)],
        env_spec={"type": "gradient"}, **kw)


def fixture_two_tone_sphere(**kw) -> SceneDesc:
    return SceneDesc(
        primitives=[Primitive(
            shape="sphere", radius=0.72,
            albedo={"texture": "two_tone", "axis": 0},
            roughness=0.7)],
        env_spec={"type": "gradient",
                  "high": [1.8, 1.7, 1.5], "low": [0.08, 0.1, 0.14]}, **kw)


def fixture_bumpy_plane(**kw) -> SceneDesc:
    return SceneDesc(
        primitives=[Primitive(
            shape="plane", normal_axis=np.array([0.0, 0.0, 1.0]),
            offset=0.0, albedo=(0.55, 0.55, 0.55), roughness=0.7,
            bake_ripple_amp=0.02, bake_ripple_freq=14.0)],
        env_spec={"type": "gradient", "direction": [0.2, -0.4, 0.9]}, **kw)


def fixture_glossy_sphere(**kw) -> SceneDesc:
    return SceneDesc(
        primitives=[Primitive(shape="sphere", radius=0.72,
                              albedo=(0.4, 0.42, 0.45), roughness=0.12)],
        env_spec={"type": "sky_sun"}, **kw)


def fixture_double_layer(gap_lo: float = 3.0, gap_hi: float = 3.05,
                         layer_tau: float = np.log(2.0)) -> tuple[SceneDesc, dict]:
    """Two parallel translucent slabs perpendicular to +z with a thin vacuum
    gap, recreating the failure geometry of expectation-based extraction.

    Returns (scene, info) where info carries the slab geometry and the peak
    density that makes each shell ~50% opaque at normal incidence.
    """
    desc = SceneDesc(
        primitives=[
            Primitive(shape="plane", normal_axis=np.array([0.0, 0.0, 1.0]),
                      offset=gap_lo, albedo=(0.6, 0.6, 0.6)),
            Primitive(shape="plane", normal_axis=np.array([0.0, 0.0, 1.0]),
                      offset=gap_hi, albedo=(0.6, 0.6, 0.6)),
        ],
        bounds_min=np.array([-0.5, -0.5, gap_lo - 0.11]),
        bounds_max=np.array([0.5, 0.5, gap_hi + 0.11]),
        env_spec={"type": "constant", "value": 1.0},
    )
    info = {"gap_lo": gap_lo, "gap_hi": gap_hi, "layer_tau": layer_tau}
    return desc, info


def bake_double_layer(dims_z: int = 64, **kw) -> tuple[DensityGrid, dict]:
    """Bake the double-layer fixture so each shell integrates to ~tau."""
    desc, info = fixture_double_layer(**kw)
    extent = desc.bounds_max - desc.bounds_min
    voxel = float(extent[2] / dims_z)
    dims = (max(2, int(round(extent[0] / voxel))),
            max(2, int(round(extent[1] / voxel))),
            dims_z)
    shell = desc.shell_voxels * voxel
    # integral of peak * exp(-x^2 / 2 shell^2) over the ray = peak*shell*sqrt(2 pi)
    desc.sigma_peak = info["layer_tau"] / (shell * np.sqrt(2 * np.pi))
    grid = bake_scene(desc, dims)
    info["voxel_size"] = grid.voxel_size
    info["shell"] = shell
    info["desc"] = desc
    return grid, info


# ---------------------------------------------------------------------------
# JSON scene files (CLI surface)


def scene_to_json(desc: SceneDesc) -> dict:
    prims = []
    for pr in desc.primitives:
        prims.append({
            "shape": pr.shape,
            "center": list(map(float, pr.center)),
            "radius": pr.radius,
            "normal_axis": list(map(float, pr.normal_axis)),
            "offset": pr.offset,
            "half_extent": list(map(float, pr.half_extent)),
            "albedo": pr.albedo if isinstance(pr.albedo, dict)
            else list(map(float, pr.albedo)),
            "roughness": pr.roughness,
            "specular_f0": pr.specular_f0,
            "bake_ripple_amp": pr.bake_ripple_amp,
            "bake_ripple_freq": pr.bake_ripple_freq,
        })
    return {
        "primitives": prims,
        "env": desc.env_spec,
        "bounds": {"min": list(map(float, desc.bounds_min)),
                   "max": list(map(float, desc.bounds_max))},
        "shell_voxels": desc.shell_voxels,
        "sigma_peak": desc.sigma_peak,
        "env_resolution": desc.env_resolution,
    }


def scene_from_json(data: dict) -> SceneDesc:
    prims = []
    for pd in data["primitives"]:
        albedo = pd.get("albedo", (0.5, 0.5, 0.5))
        prims.append(Primitive(
            shape=pd["shape"],
            center=np.asarray(pd.get("center", [0, 0, 0]), dtype=np.float64),
            radius=float(pd.get("radius", 0.5)),
            normal_axis=np.asarray(pd.get("normal_axis", [0, 0, 1]),
                                   dtype=np.float64),
            offset=float(pd.get("offset", 0.0)),
            half_extent=np.asarray(pd.get("half_extent", [0.5] * 3),
                                   dtype=np.float64),
            albedo=albedo if isinstance(albedo, dict) else tuple(albedo),
            roughness=float(pd.get("roughness", 0.6)),
            specular_f0=float(pd.get("specular_f0", _brdf.SPECULAR_F0)),
            bake_ripple_amp=float(pd.get("bake_ripple_amp", 0.0)),
            bake_ripple_freq=float(pd.get("bake_ripple_freq", 8.0)),
        ))
    bounds = data.get("bounds", {})
    return SceneDesc(
        primitives=prims,
        env_spec=data.get("env", {"type": "constant", "value": 1.0}),
        bounds_min=np.asarray(bounds.get("min", [-1, -1, -1]), dtype=np.float64),
        bounds_max=np.asarray(bounds.get("max", [1, 1, 1]), dtype=np.float64),
        shell_voxels=float(data.get("shell_voxels", SHELL_VOXELS)),
        sigma_peak=float(data.get("sigma_peak", SIGMA_PEAK)),
        env_resolution=int(data.get("env_resolution", _env.DEFAULT_RESOLUTION)),
    )


def save_scene(path, desc: SceneDesc) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_json(desc), f, indent=1)


def load_scene(path) -> SceneDesc:
    with open(path) as f:
        return scene_from_json(json.load(f))
