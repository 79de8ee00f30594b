"""Monte-Carlo shading of surfels under the environment map, plus full-image
synthesis (novel views, relighting, material edits).

Shading estimates the hemisphere integral of brdf * env * visibility * cos
with the roughness-driven sample set from the brdf module.  Each sample's
environment lookup picks the mip level matching the sample's solid angle.
A lightweight tape records everything needed to push loss gradients back
to surfel attributes and environment texels without a framework.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import brdf as _brdf
from . import envmap as _env
from . import octree as _oct
from . import surface as _surf
from .grids import DensityGrid
from .surfels import SurfelCloud, bin_index

KNN_K = 8
KNN_BANDWIDTH_VOXELS = 2.0


@dataclass
class Camera:
    """Pinhole camera; pose maps camera coordinates to world (x right,
    y down, z forward)."""

    pose: np.ndarray  # 4x4 world-from-camera, row major
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space (origins, unit directions) for every pixel center,
        row-major pixel order."""
        j, i = np.meshgrid(np.arange(self.height), np.arange(self.width),
                           indexing="ij")
        x = (i.ravel() + 0.5 - self.cx) / self.fx
        y = (j.ravel() + 0.5 - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
        r = self.pose[:3, :3]
        d = d_cam @ r.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.pose[:3, 3], d.shape)
        return o.copy(), d

    def to_dict(self) -> dict:
        return {
            "pose": [[float(v) for v in row] for row in self.pose],
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(pose=np.asarray(d["pose"], dtype=np.float64),
                   fx=float(d["fx"]), fy=float(d["fy"]),
                   cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]))


def save_cameras(path, cameras: list[Camera]) -> None:
    with open(path, "w") as f:
        json.dump({"cameras": [c.to_dict() for c in cameras]}, f, indent=1)


def load_cameras(path) -> list[Camera]:
    with open(path) as f:
        data = json.load(f)
    if "cameras" in data:
        return [Camera.from_dict(d) for d in data["cameras"]]
    return [Camera.from_dict(data)]


@dataclass
class RenderConfig:
    n_spec: int = _brdf.N_SPEC
    n_diff: int = _brdf.N_DIFF
    visibility_source: str = "bins"  # "bins" | "octree"
    seed: int = 0
    mis: bool = True
    diffuse_sampling: str = "cosine"
    steps_per_unit: int = _surf.STEPS_PER_UNIT
    tau_hit: float = _surf.TAU_HIT
    knn_k: int = KNN_K
    knn_bandwidth_voxels: float = KNN_BANDWIDTH_VOXELS
    specular_f0: float = _brdf.SPECULAR_F0
    chunk_pixels: int = 2048

    def __post_init__(self):
        if self.n_spec < 1 or self.n_diff < 1:
            raise ValueError("sample counts must be >= 1")


def render_loss(predicted, observed) -> float:
    """Squared L2 color error for one ray."""
    p = np.asarray(predicted, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    return float(np.sum((o - p) ** 2))


@dataclass
class FrozenSamples:
    """Replayable stop-gradient inputs of one shading evaluation."""

    dset: object
    weights: np.ndarray
    bin_idx: np.ndarray | None


@dataclass
class ShadingTape:
    """Flat per-sample records from one shading pass; ``backward`` pushes
    d(loss)/d(radiance) to parameter gradients."""

    n_points: int
    point: np.ndarray
    weights: np.ndarray       # estimator weight per sample
    f_total: np.ndarray       # brdf value used (m, 3)
    env_rgb: np.ndarray       # (m, 3)
    vis: np.ndarray           # (m,)
    cos: np.ndarray           # (m,)
    dirs: np.ndarray          # (m, 3) light directions (w_i)
    wos: np.ndarray           # per-point view directions (n_points, 3)
    normals: np.ndarray       # per-point normals (n_points, 3)
    d_albedo: np.ndarray      # (m, 3) diagonal albedo coefficients
    d_alpha: np.ndarray       # (m, 3)
    # factored normal Jacobians (see brdf.shade_terms)
    jac_spec_rgb: np.ndarray  # (m, 3)
    jac_spec_vec: np.ndarray  # (m, 3)
    jac_diff_rgb_i: np.ndarray
    jac_diff_rgb_o: np.ndarray
    bin_idx: np.ndarray | None
    footprint: _env.Footprint | None
    env: _env.EnvCubeMap | None
    lobe: np.ndarray | None = None
    mip_levels: np.ndarray | None = None
    mip_pdfs: np.ndarray | None = None
    frozen: "FrozenSamples | None" = None

    def backward(self, dL_drad: np.ndarray, env_accumulators=None):
        """Returns (g_albedo, g_alpha, g_normal, g_bins); optionally
        accumulates environment texel gradients per mip level."""
        dl = np.asarray(dL_drad, dtype=np.float64)[self.point]  # (m, 3)
        w = self.weights
        lv = self.env_rgb * (self.vis * self.cos)[:, None]      # (m, 3)
        common = dl * w[:, None]                                 # (m, 3)

        g_albedo = _scatter_rows(self.point, common * self.d_albedo * lv,
                                 self.n_points)
        g_alpha = np.bincount(
            self.point, weights=np.sum(common * self.d_alpha * lv, axis=1),
            minlength=self.n_points)

        # normal: factored brdf jacobians plus the cosine-factor derivative
        per_c = common * self.env_rgb * self.vis[:, None]        # (m, 3)
        per_cos = per_c * self.cos[:, None]
        su = np.sum(per_cos * self.jac_spec_rgb, axis=1)
        di = np.sum(per_cos * self.jac_diff_rgb_i, axis=1)
        do = np.sum(per_cos * self.jac_diff_rgb_o, axis=1)
        cos_active = np.sum(per_c * self.f_total, axis=1) * (self.cos > 0)
        g_vec = su[:, None] * self.jac_spec_vec \
            + (di + cos_active)[:, None] * self.dirs
        g_normal = _scatter_rows(self.point, g_vec, self.n_points)
        g_normal += np.bincount(self.point, weights=do,
                                minlength=self.n_points)[:, None] * self.wos
        # report in the tangent plane of the shading normal
        proj = np.sum(g_normal * self.normals, axis=1, keepdims=True)
        g_normal -= proj * self.normals

        g_bins = None
        if self.bin_idx is not None:
            vals = np.sum(common * self.f_total * self.env_rgb, axis=1) \
                * self.cos
            g_bins = (self.point, self.bin_idx, vals)

        if env_accumulators is not None and self.footprint is not None:
            d_env = common * self.f_total * (self.vis * self.cos)[:, None]
            _env.scatter_env_gradient(self.env, self.footprint, d_env,
                                      env_accumulators)
        return g_albedo, g_alpha, g_normal, g_bins


def shade_batch(positions, normals, albedo, roughness, omega_v, env,
                config: RenderConfig, rng, visibility,
                with_tape: bool = False, tree: _oct.Octree | None = None,
                uniforms=None, frozen: "FrozenSamples | None" = None):
    """Shade a batch of surface points.

    ``omega_v`` points from the surface toward the camera.  ``visibility``
    is either a (n, V) per-point bin array ("bins" source) or ignored in
    favor of on-the-fly octree queries ("octree" source, one transmittance
    integral per light sample).  Returns (n, 3) radiance, optionally with a
    ShadingTape.

    ``frozen`` replays a previous sample set (directions, estimator
    weights, bin assignments); gradients never flow through those, so a
    frozen re-evaluation is the exact function the analytic gradients
    differentiate.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    alpha = np.atleast_1d(np.asarray(roughness, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(omega_v, dtype=np.float64))
    n_pts = len(positions)

    if frozen is not None:
        dset = frozen.dset
    elif uniforms is not None:
        u_spec, u_diff = uniforms
        dset = _brdf.sample_direction_batch(
            alpha, normals, wo, None, config.n_spec, config.n_diff,
            config.diffuse_sampling, u_spec=u_spec, u_diff=u_diff,
            defer_pdf=True)
    else:
        dset = _brdf.sample_direction_batch(
            alpha, normals, wo, rng, config.n_spec, config.n_diff,
            config.diffuse_sampling, defer_pdf=True)
    pi = dset.point

    f0 = np.full((1, 3), config.specular_f0)
    terms = _brdf.shade_terms(albedo[pi], alpha[pi], f0, normals[pi],
                              dset.dirs, wo[pi],
                              diffuse=config.diffuse_sampling,
                              with_grads=with_tape)
    if frozen is None and not np.any(dset.pdf):
        # pdf computation was deferred; both lobe densities came out of
        # shade_terms for free
        dset.pdf = np.where(dset.lobe == 0, terms["p_spec"],
                            terms["p_diff"])
    if frozen is not None:
        weights = frozen.weights
    elif config.mis:
        weights = 1.0 / np.maximum(
            config.n_spec * terms["p_spec"]
            + config.n_diff * terms["p_diff"], 1e-300)
    else:
        counts = np.where(dset.lobe == 0, config.n_spec, config.n_diff)
        weights = 1.0 / np.maximum(counts * dset.pdf, 1e-300)

    if config.mis:
        f_total = terms["f_diff"] + terms["f_spec"]
    else:
        f_total = np.where((dset.lobe == 0)[:, None], terms["f_spec"],
                           terms["f_diff"])
    cos = terms["cos_i"]

    # per-sample mip level from the sample's own lobe pdf
    n_lobe = np.where(dset.lobe == 0, config.n_spec, config.n_diff)
    face, u, v = _env.dir_to_face_uv(dset.dirs)
    levels = _env.mip_level(1, dset.pdf * n_lobe, env.resolution, u, v,
                            env.n_levels)
    env_rgb, footprint = _env.sample_env(env, dset.dirs, levels,
                                         with_footprint=True,
                                         face_uv=(face, u, v))

    bin_idx = None
    if config.visibility_source == "octree":
        if tree is None:
            raise ValueError("octree visibility requires a tree")
        vis = _oct.visibility_batch(tree, positions[pi], dset.dirs,
                                    steps_per_unit=config.steps_per_unit)
    else:
        vis_bins = np.atleast_2d(np.asarray(visibility, dtype=np.float64))
        bin_idx = frozen.bin_idx if frozen is not None \
            else bin_index(normals[pi], dset.dirs)
        vis = vis_bins[pi, bin_idx]

    contrib = weights[:, None] * f_total * env_rgb * (vis * cos)[:, None]
    radiance = _scatter_rows(pi, contrib, n_pts)

    if not with_tape:
        return radiance

    d_alb = terms["d_albedo"]
    d_alpha = terms["d_alpha"]
    j_srgb = terms["jac_spec_rgb"]
    j_di = terms["jac_diff_rgb_i"]
    j_do = terms["jac_diff_rgb_o"]
    if not config.mis:
        spec_rows = (dset.lobe == 0)[:, None]
        d_alb = np.where(spec_rows, 0.0, d_alb)
        d_alpha = np.where(spec_rows, d_alpha, 0.0)
        j_srgb = np.where(spec_rows, j_srgb, 0.0)
        j_di = np.where(spec_rows, 0.0, j_di)
        j_do = np.where(spec_rows, 0.0, j_do)
    tape = ShadingTape(
        n_points=n_pts, point=pi, weights=weights, f_total=f_total,
        env_rgb=env_rgb, vis=vis, cos=cos, dirs=dset.dirs, wos=wo,
        normals=normals, d_albedo=d_alb, d_alpha=d_alpha,
        jac_spec_rgb=j_srgb, jac_spec_vec=terms["jac_spec_vec"],
        jac_diff_rgb_i=j_di, jac_diff_rgb_o=j_do,
        bin_idx=bin_idx, footprint=footprint, env=env,
        lobe=dset.lobe, mip_levels=levels, mip_pdfs=dset.pdf,
        frozen=FrozenSamples(dset=dset, weights=weights, bin_idx=bin_idx),
    )
    return radiance, tape


def _scatter_rows(idx, values, n_rows):
    """bincount-based row scatter-add (much faster than np.add.at)."""
    values = np.atleast_2d(values)
    out = np.empty((n_rows, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(idx, weights=values[:, c], minlength=n_rows)
    return out


def shade_point(surfel, omega_v, env, config: RenderConfig, rng,
                tree: _oct.Octree | None = None) -> np.ndarray:
    """Outgoing radiance of one surfel toward the camera direction."""
    vis = surfel.visibility_bins[None, :]
    rad = shade_batch(
        surfel.position[None, :], surfel.normal[None, :],
        surfel.albedo[None, :], np.asarray([surfel.roughness]),
        np.asarray(omega_v, dtype=np.float64)[None, :], env, config, rng,
        visibility=vis, tree=tree)
    return rad[0]


def interpolate_attributes(cloud: SurfelCloud, pts: np.ndarray,
                           voxel_size: float, k: int = KNN_K,
                           bandwidth_voxels: float = KNN_BANDWIDTH_VOXELS):
    """Gaussian-weighted kNN pull of surfel attributes onto query points."""
    kq = min(k, len(cloud))
    dist, idx = cloud.knn_index().query(pts, k=kq)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    bw = bandwidth_voxels * voxel_size
    w = np.exp(-(dist**2) / (2.0 * bw * bw))
    w /= np.maximum(w.sum(axis=1, keepdims=True), 1e-300)
    albedo = np.einsum("nk,nkc->nc", w, cloud.albedo[idx])
    rough = np.sum(w * cloud.roughness[idx], axis=1)
    normals = np.einsum("nk,nkc->nc", w, cloud.normals[idx])
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(norms > 1e-12, normals / np.maximum(norms, 1e-12),
                       cloud.normals[idx[:, 0]])
    vis = np.einsum("nk,nkv->nv", w, cloud.visibility[idx])
    return albedo, rough, normals, vis


def render_image(camera: Camera, grid: DensityGrid, tree: _oct.Octree,
                 cloud: SurfelCloud, env: _env.EnvCubeMap,
                 config: RenderConfig):
    """Full-frame HDR render: returns (H, W, 3) radiance and (H, W) alpha.

    Per pixel: opacity-median surface extraction, Gaussian-kNN attribute
    interpolation, Monte-Carlo shading with per-pixel RNG streams derived
    from (seed, pixel index).
    """
    h, w = camera.height, camera.width
    origins, dirs = camera.rays()
    image = np.zeros((h * w, 3))
    alpha = np.zeros(h * w)

    from .grids import ray_box_span_batch

    tn, tf, ok = ray_box_span_batch(grid, origins, dirs)
    if ok.any():
        t_end, _ = _oct.transmittance_fast_batch(
            tree, origins[ok], dirs[ok], tn[ok], tf[ok],
            steps_per_unit=config.steps_per_unit)
        hit_sub = t_end >= config.tau_hit
        hit = np.zeros_like(ok)
        hit[np.nonzero(ok)[0][hit_sub]] = True
        alpha_vals = np.clip(2.0 * t_end, 0.0, 1.0) * hit_sub
        alpha[ok] = alpha_vals
    else:
        hit = np.zeros_like(ok)

    hit_idx = np.nonzero(hit)[0]
    for c0 in range(0, len(hit_idx), config.chunk_pixels):
        sel = hit_idx[c0:c0 + config.chunk_pixels]
        n_steps = max(2, int(np.ceil(
            float(np.max(tf[sel] - tn[sel])) * config.steps_per_unit)))
        ts, T = _surf.transmittance_profile_batch(
            grid, origins[sel], dirs[sel], tn[sel], tf[sel], n_steps)
        s_par = _surf.median_params_batch(ts, T)
        x_s = origins[sel] + s_par[:, None] * dirs[sel]
        albedo, rough, normals, vis = interpolate_attributes(
            cloud, x_s, grid.voxel_size, config.knn_k,
            config.knn_bandwidth_voxels)
        wo = -dirs[sel]
        u_spec = np.empty((len(sel), config.n_spec, 2))
        u_diff = np.empty((len(sel), config.n_diff, 2))
        for row, px in enumerate(sel):
            prng = np.random.default_rng([config.seed, int(px)])
            u_spec[row] = prng.random((config.n_spec, 2))
            u_diff[row] = prng.random((config.n_diff, 2))
        rad = shade_batch(
            x_s, normals, albedo, rough, wo, env, config, None,
            visibility=vis, tree=tree,
            uniforms=(u_spec.reshape(-1, 2), u_diff.reshape(-1, 2)))
        image[sel] = rad
    return image.reshape(h, w, 3), alpha.reshape(h, w)


def relight(camera, grid, tree, cloud, new_env, config):
    """Re-render the decomposition under substituted lighting."""
    return render_image(camera, grid, tree, cloud, new_env, config)


def edit_material(camera, grid, tree, cloud: SurfelCloud, env, config,
                  edit_fn):
    """Render with surfel attributes mapped through ``edit_fn(cloud_copy)``.

    The edit function mutates the copy in place (e.g. scale albedo, set
    roughness); geometry and untouched attributes are bit-identical.
    """
    copy = SurfelCloud(
        positions=cloud.positions.copy(), albedo=cloud.albedo.copy(),
        roughness=cloud.roughness.copy(), normals=cloud.normals.copy(),
        visibility=cloud.visibility.copy(),
        init_normals=cloud.init_normals.copy(),
        init_visibility=cloud.init_visibility.copy(),
        erratic=cloud.erratic.copy(),
        view_dirs=None if cloud.view_dirs is None else cloud.view_dirs.copy(),
    )
    edit_fn(copy)
    return render_image(camera, grid, tree, copy, env, config)
