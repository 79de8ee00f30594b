"""Multi-stage decomposition of a density/radiance volume into surfel
reflectance and environment lighting.

Stage A trains normals and visibility bins against the render loss with
neutral materials, tethered to their extraction-time values by the
commitment loss.  A warm-up stage then unlocks albedo, roughness, and the
environment with a strong commitment weight and reduced priors, and the
joint stage runs the full objective:

    L = lr * render + lc * (commitment + view term) + priors + env smoothness

Parameters are per-surfel attributes plus log-radiance environment texels;
all gradients are analytic and the optimizer is Adam with one group per
attribute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envmap as _env
from . import gkdtree as _gkd
from . import octree as _oct
from . import render as _render
from . import surface as _surf
from .errors import NoSurface, NonFiniteLoss
from .grids import DensityGrid, ray_box_span_batch
from .render import RenderConfig, shade_batch
from .surfels import N_BINS, ROUGHNESS_EPS, SurfelCloud, bin_directions


@dataclass
class LossWeights:
    render: float = 1.0
    commitment_warmup: float = 0.5
    commitment_joint: float = 0.1
    smooth_albedo: float = 0.5
    smooth_roughness: float = 0.01
    smooth_shape: float = 0.1
    parsimony_albedo: float = 0.1
    parsimony_roughness: float = 0.005
    env_smooth: float = 1.0
    warmup_prior_scale: float = 0.1

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class StageSchedule:
    stage_a_epochs: int = 100
    warmup_epochs: int = 100
    joint_epochs: int = 200
    batch_size: int = 1024
    lr_albedo: float = 1e-2
    lr_roughness: float = 1e-2
    lr_visibility: float = 1e-2
    lr_normal: float = 5e-3
    lr_env: float = 2e-2

    def __post_init__(self):
        if min(self.stage_a_epochs, self.warmup_epochs, self.joint_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainData:
    cloud: SurfelCloud
    observed: np.ndarray   # (n, 3) pixel colors paired with each surfel
    view_dirs: np.ndarray  # (n, 3) unit directions surface -> camera


# ---------------------------------------------------------------------------
# extraction of training surfels


def extract_training_surfels(grid: DensityGrid, tree: _oct.Octree,
                             cameras, images, masks=None,
                             config: RenderConfig | None = None,
                             erratic_knn: int = 8) -> TrainData:
    """One surfel per foreground training ray.

    Surface points come from the opacity-median rule; normals from the
    density-weighted gradient average; initial visibility bins from octree
    transmittance along the bin center directions.  Surfels closer than
    1e-6 to an earlier one are dropped.
    """
    if config is None:
        config = RenderConfig()
    pos_all, nrm_all, err_all, obs_all, vdir_all = [], [], [], [], []
    for ci, cam in enumerate(cameras):
        origins, dirs = cam.rays()
        img = np.asarray(images[ci], dtype=np.float64).reshape(-1, 3)
        tn, tf, ok = ray_box_span_batch(grid, origins, dirs)
        if masks is not None:
            ok &= np.asarray(masks[ci]).reshape(-1) > 0.5
        if not ok.any():
            continue
        t_end, _ = _oct.transmittance_fast_batch(
            tree, origins[ok], dirs[ok], tn[ok], tf[ok],
            steps_per_unit=config.steps_per_unit)
        hit_sub = t_end >= config.tau_hit
        sel = np.nonzero(ok)[0][hit_sub]
        if len(sel) == 0:
            continue
        n_steps = max(2, int(np.ceil(
            float(np.max(tf[sel] - tn[sel])) * config.steps_per_unit)))
        ts, T = _surf.transmittance_profile_batch(
            grid, origins[sel], dirs[sel], tn[sel], tf[sel], n_steps)
        s_par = _surf.median_params_batch(ts, T)
        x_s = origins[sel] + s_par[:, None] * dirs[sel]
        normals, erratic = _surf.extract_normals_batch(grid, x_s)
        pos_all.append(x_s)
        nrm_all.append(normals)
        err_all.append(erratic)
        obs_all.append(img[sel])
        vdir_all.append(-dirs[sel])

    if not pos_all:
        raise NoSurface("no training ray accumulated enough opacity")
    positions = np.concatenate(pos_all)
    normals = np.concatenate(nrm_all)
    erratic = np.concatenate(err_all)
    observed = np.concatenate(obs_all)
    view_dirs = np.concatenate(vdir_all)

    keep = _dedup_mask(positions)
    positions, normals, erratic = positions[keep], normals[keep], erratic[keep]
    observed, view_dirs = observed[keep], view_dirs[keep]
    n = len(positions)

    # erratic rule, part 2: angle to the mean neighbor init normal > 60 deg
    if n > erratic_knn:
        from scipy.spatial import cKDTree

        kdt = cKDTree(positions)
        _, idx = kdt.query(positions, k=erratic_knn + 1)
        neigh = normals[idx[:, 1:]].mean(axis=1)
        neigh /= np.maximum(np.linalg.norm(neigh, axis=1, keepdims=True), 1e-12)
        cos_a = np.sum(normals * neigh, axis=1)
        erratic |= cos_a < 0.5  # cos 60 deg

    # initial visibility: octree transmittance along every bin center
    init_vis = np.empty((n, N_BINS))
    chunk = 4096
    for c0 in range(0, n, chunk):
        sl = slice(c0, min(c0 + chunk, n))
        pts = positions[sl]
        dirs = np.stack([bin_directions(normals[i + c0])
                         for i in range(len(pts))])  # (k, V, 3)
        rep_pts = np.repeat(pts, N_BINS, axis=0)
        vis = _oct.visibility_batch(tree, rep_pts, dirs.reshape(-1, 3),
                                    steps_per_unit=config.steps_per_unit)
        init_vis[sl] = vis.reshape(len(pts), N_BINS)

    cloud = SurfelCloud(
        positions=positions,
        albedo=np.full((n, 3), 0.5),
        roughness=np.full(n, 0.5),
        normals=normals,
        visibility=init_vis,
        init_normals=normals.copy(),
        init_visibility=init_vis.copy(),
        erratic=erratic,
        view_dirs=view_dirs,
    )
    return TrainData(cloud=cloud, observed=observed, view_dirs=view_dirs)


def _dedup_mask(positions: np.ndarray, min_dist: float = 1e-6) -> np.ndarray:
    from scipy.spatial import cKDTree

    keep = np.ones(len(positions), dtype=bool)
    pairs = cKDTree(positions).query_pairs(min_dist, output_type="ndarray")
    if len(pairs):
        keep[np.maximum(pairs[:, 0], pairs[:, 1])] = False
    return keep


# ---------------------------------------------------------------------------
# individual losses


def commitment_loss(cloud: SurfelCloud, batch, with_grad: bool = False):
    """Squared deviation of normals and visibility bins from their
    extraction-time values; erratic surfels are excluded."""
    batch = np.asarray(batch, dtype=np.int64)
    active = batch[~cloud.erratic[batch]]
    if len(active) == 0:
        if with_grad:
            return 0.0, np.zeros((len(batch), 3)), np.zeros(
                (len(batch), cloud.n_bins)), batch
        return 0.0
    dn = cloud.normals[active] - cloud.init_normals[active]
    dv = cloud.visibility[active] - cloud.init_visibility[active]
    loss_n = float(np.mean(np.sum(dn**2, axis=1)))
    loss_v = float(np.mean(np.mean(dv**2, axis=1)))
    loss = loss_n + loss_v
    if not with_grad:
        return loss
    g_n = 2.0 * dn / len(active)
    g_v = 2.0 * dv / (len(active) * cloud.n_bins)
    return loss, g_n, g_v, active


def normal_view_visibility_loss(cloud: SurfelCloud, batch, view_dirs,
                                with_grad: bool = False):
    """Penalty for normals facing away from the camera that observed them:
    mean of max(0, -n . w_v)^2."""
    batch = np.asarray(batch, dtype=np.int64)
    n = cloud.normals[batch]
    wv = np.asarray(view_dirs, dtype=np.float64)
    neg = np.maximum(0.0, -np.sum(n * wv, axis=1))
    loss = float(np.mean(neg**2))
    if not with_grad:
        return loss
    g = (2.0 * neg / len(batch))[:, None] * (-wv)
    return loss, g


# ---------------------------------------------------------------------------
# Adam over named parameter groups


class Adam:
    """Adam over named parameter groups with optional lazy row updates.

    Passing ``rows[name]`` restricts that group's moment and parameter
    update to the given first-axis indices (rows outside the support of
    the gradient carry exact zeros, so skipping them only freezes their
    moment decay, the usual lazy/sparse Adam semantics).
    """

    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray],
             rows: dict[str, np.ndarray] | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 / (1 - b1**self.t)
        c2 = 1.0 / (1 - b2**self.t)
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            sel = rows.get(name) if rows else None
            if sel is None:
                m = self.m[name]
                v = self.v[name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                params[name] -= self.lrs[name] * (m * c1) / (
                    np.sqrt(v * c2) + self.eps)
            else:
                gs = g[sel]
                m = self.m[name][sel] * b1 + (1 - b1) * gs
                v = self.v[name][sel] * b2 + (1 - b2) * gs * gs
                self.m[name][sel] = m
                self.v[name][sel] = v
                params[name][sel] -= self.lrs[name] * (m * c1) / (
                    np.sqrt(v * c2) + self.eps)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))


def _logit(p):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p / (1 - p))


# ---------------------------------------------------------------------------
# the optimization driver


@dataclass
class EpochMetrics:
    epoch: int
    stage: str
    total: float
    render: float
    commitment: float
    priors: float
    psnr: float


class Decomposer:
    """Owns the parameter state and runs the staged optimization."""

    def __init__(self, grid: DensityGrid, tree: _oct.Octree, data: TrainData,
                 weights: LossWeights, schedule: StageSchedule,
                 config: RenderConfig, seed: int = 0,
                 env_resolution: int = _env.DEFAULT_RESOLUTION,
                 gkd_params: dict | None = None,
                 smooth_attrs: tuple[str, ...] = ("normal", "albedo",
                                                  "roughness", "visibility"),
                 smooth_norm: str = "l1"):
        self.grid = grid
        self.tree = tree
        self.data = data
        self.weights = weights
        self.schedule = schedule
        self.config = config
        self.seed = seed
        self.smooth_attrs = smooth_attrs
        self.smooth_norm = smooth_norm
        gp = {
            "pos_bw_voxels": _gkd.BW_POSITION_VOXELS,
            "bw_normal": _gkd.BW_NORMAL,
            "bw_albedo": _gkd.BW_ALBEDO,
            "bw_roughness": _gkd.BW_ROUGHNESS,
            "bw_visibility": _gkd.BW_VISIBILITY,
            "bw_parsimony": _gkd.BW_PARSIMONY,
            "m_samples": _gkd.NEIGHBOR_SAMPLES,
            "kmeans_k": _gkd.KMEANS_K,
            "keep_per_cluster": _gkd.KEEP_PER_CLUSTER,
        }
        if gkd_params:
            gp.update(gkd_params)
        self.gkd = gp

        cloud = data.cloud
        n = len(cloud)
        self.params = {
            "albedo": _logit(cloud.albedo.copy()),
            "roughness": self._rough_to_logit(cloud.roughness.copy()),
            "visibility": _logit(cloud.visibility.copy()),
            "normal": cloud.normals.copy(),
            "env": None,  # set below
        }
        mean_obs = np.clip(2.0 * data.observed.mean(axis=0), 1e-3, None)
        self.params["env"] = np.log(
            np.broadcast_to(mean_obs, (6, env_resolution, env_resolution, 3))
            .copy())
        self.optimizer = Adam({
            "albedo": schedule.lr_albedo,
            "roughness": schedule.lr_roughness,
            "visibility": schedule.lr_visibility,
            "normal": schedule.lr_normal,
            "env": schedule.lr_env,
        })
        self.metrics: list[EpochMetrics] = []
        self._trees: dict[str, _gkd.GaussianKdTree] = {}
        self._pars_candidates: np.ndarray | None = None
        self.n_surfels = n
        # transform caches; valid because lazy Adam only mutates the rows
        # recorded per step, and those rows are refreshed after each update
        self._cache = {
            "albedo": _sigmoid(self.params["albedo"]),
            "roughness": ROUGHNESS_EPS + (1 - 2 * ROUGHNESS_EPS)
            * _sigmoid(self.params["roughness"]),
            "visibility": _sigmoid(self.params["visibility"]),
        }

    # -- parameter views ---------------------------------------------------

    @staticmethod
    def _rough_to_logit(r):
        u = (r - ROUGHNESS_EPS) / (1 - 2 * ROUGHNESS_EPS)
        return _logit(u)

    def albedo(self):
        return self._cache["albedo"]

    def roughness(self):
        return self._cache["roughness"]

    def visibility(self):
        return self._cache["visibility"]

    def normals(self):
        return self.params["normal"]

    def _fresh_transforms(self):
        """Transforms recomputed directly from the parameters (used when
        replaying a frozen sample set after external parameter edits)."""
        return (_sigmoid(self.params["albedo"]),
                ROUGHNESS_EPS + (1 - 2 * ROUGHNESS_EPS)
                * _sigmoid(self.params["roughness"]),
                _sigmoid(self.params["visibility"]))

    def env_map(self) -> _env.EnvCubeMap:
        return _env.EnvCubeMap(np.exp(self.params["env"]))

    def sync_cloud(self) -> SurfelCloud:
        cloud = self.data.cloud
        cloud.set_albedo(self.albedo())
        cloud.set_roughness(self.roughness())
        cloud.set_normals(self.normals())
        cloud.set_visibility(self.visibility())
        return cloud

    # -- per-epoch structures ------------------------------------------------

    def _rebuild_trees(self, epoch: int, attrs, rng) -> None:
        pos_bw = self.gkd["pos_bw_voxels"] * self.grid.voxel_size
        pos = self.data.cloud.positions
        vis = self.visibility()
        # bin arrays are pooled to per-band means for the tree feature only
        # (full bins stay in the loss residual); keeps the tree dimension
        # and descent cost bounded
        vis_feat = vis.reshape(len(vis), -1, 8).mean(axis=2)
        feats = {
            "normal": (self.normals(), self.gkd["bw_normal"]),
            "albedo": (self.albedo(), self.gkd["bw_albedo"]),
            "roughness": (self.roughness()[:, None], self.gkd["bw_roughness"]),
            "visibility": (vis_feat, self.gkd["bw_visibility"]),
        }
        self._trees = {}
        for name in attrs:
            vals, bw = feats[name]
            v = _gkd.smoothness_features(pos, vals, pos_bw, bw)
            self._trees[name] = _gkd.build_gkdtree(v, epoch=epoch)
        if "albedo" in attrs or "roughness" in attrs:
            self._pars_candidates = _gkd.parsimony_candidates(
                self.albedo(), self.gkd["kmeans_k"],
                self.gkd["keep_per_cluster"], rng, max_points=4096)

    # -- loss evaluation and one optimization step ---------------------------

    def loss_and_grads(self, batch, stage: str, epoch: int, rng,
                       frozen: dict | None = None):
        """Total loss plus parameter-space gradients for one batch.

        When ``frozen`` is given, all stop-gradient sample sets (shading
        directions, estimator weights, bin assignments, KD-tree draws,
        parsimony kernels) are replayed from it, so finite differences of
        this function match the analytic gradients.  Returns
        (losses dict, grads dict, frozen dict).
        """
        w = self.weights
        cloud = self.data.cloud
        batch = np.asarray(batch, dtype=np.int64)
        obs = self.data.observed[batch]
        wv = self.data.view_dirs[batch]
        capture = frozen is None
        if capture:
            frozen = {}
            albedo = self.albedo()
            rough = self.roughness()
            vis = self.visibility()
        else:
            albedo, rough, vis = self._fresh_transforms()
        normals = self.normals()
        touched = {"albedo": [batch], "roughness": [batch],
                   "visibility": [batch], "normal": [batch]}

        trainable = (("normal", "visibility") if stage == "stage_a"
                     else ("albedo", "roughness", "visibility", "normal",
                           "env"))
        lam_c = (w.commitment_joint if stage == "joint"
                 else w.commitment_warmup)
        prior_scale = w.warmup_prior_scale if stage == "warmup" else 1.0
        if stage == "stage_a":
            smooth_active = tuple(a for a in self.smooth_attrs
                                  if a in ("normal", "visibility"))
            pars_active = False
        else:
            smooth_active = self.smooth_attrs
            pars_active = True

        env = self.env_map()
        radiance, tape = shade_batch(
            cloud.positions[batch], normals[batch], albedo[batch],
            rough[batch], wv, env, self.config, rng,
            visibility=vis[batch], with_tape=True,
            frozen=frozen.get("shading"))
        if capture:
            frozen["shading"] = tape.frozen

        resid = radiance - obs
        loss_r = float(np.mean(np.sum(resid**2, axis=1)))
        dL_drad = 2.0 * resid / len(batch)

        env_acc = _env.EnvAccumulator(env)
        g_alb_b, g_rough_b, g_norm_b, g_bins = tape.backward(
            w.render * dL_drad, env_accumulators=env_acc)

        g = {
            "albedo": np.zeros((self.n_surfels, 3)),
            "roughness": np.zeros(self.n_surfels),
            "visibility": np.zeros((self.n_surfels, cloud.n_bins)),
            "normal": np.zeros((self.n_surfels, 3)),
        }
        g["albedo"][batch] += w.render * g_alb_b
        g["roughness"][batch] += w.render * g_rough_b
        g["normal"][batch] += w.render * g_norm_b
        if g_bins is not None:
            pt, bi, vals = g_bins
            v_bins = cloud.n_bins
            flat = batch[pt] * v_bins + bi
            g["visibility"] += np.bincount(
                flat, weights=w.render * vals,
                minlength=self.n_surfels * v_bins
            ).reshape(self.n_surfels, v_bins)

        # commitment + view-direction loss (erratic surfels excluded)
        active = batch[~cloud.erratic[batch]]
        if len(active):
            dn = normals[active] - cloud.init_normals[active]
            dv = vis[active] - cloud.init_visibility[active]
            loss_c = float(np.mean(np.sum(dn**2, axis=1))) \
                + float(np.mean(np.mean(dv**2, axis=1)))
            g["normal"][active] += lam_c * (2.0 * dn / len(active))
            g["visibility"][active] += lam_c * (
                2.0 * dv / (len(active) * cloud.n_bins))
        else:
            loss_c = 0.0
        neg = np.maximum(0.0, -np.sum(normals[batch] * wv, axis=1))
        v_loss = float(np.mean(neg**2))
        g["normal"][batch] += lam_c * (2.0 * neg / len(batch))[:, None] * (-wv)
        loss_c_total = loss_c + v_loss

        # priors
        loss_p = 0.0
        attr_values = {"normal": normals, "albedo": albedo,
                       "roughness": rough[:, None], "visibility": vis}
        smooth_w = {"normal": w.smooth_shape, "albedo": w.smooth_albedo,
                    "roughness": w.smooth_roughness,
                    "visibility": w.smooth_shape}
        for name in smooth_active:
            lam = smooth_w[name] * prior_scale
            if lam == 0.0 or name not in self._trees:
                continue
            key = f"smooth_{name}"
            draws = frozen.get(key)
            if draws is None:
                draws = _gkd.sample_neighbors_batch(
                    self._trees[name], batch, self.gkd["m_samples"], rng)
                if capture:
                    frozen[key] = draws
            sl, sg = _gkd.smoothness_loss(
                attr_values[name], self._trees[name], batch,
                self.gkd["m_samples"], rng, epoch=epoch,
                norm=self.smooth_norm, draws=draws)
            loss_p += lam * sl
            touched[name].append(draws[0].ravel())
            if name == "roughness":
                g["roughness"] += lam * sg[:, 0]
            else:
                g[name] += lam * sg
        if pars_active and self._pars_candidates is not None:
            for name, lam_p in (("albedo", w.parsimony_albedo),
                                ("roughness", w.parsimony_roughness)):
                lam = lam_p * prior_scale
                if lam == 0.0:
                    continue
                key = f"pars_{name}"
                kern = frozen.get(key)
                if kern is None:
                    kern = _gkd.parsimony_kernel(
                        albedo, batch, self._pars_candidates,
                        self.gkd["bw_parsimony"])
                    if capture:
                        frozen[key] = kern
                pl, pg = _gkd.parsimony_loss(
                    albedo, attr_values[name], batch, self._pars_candidates,
                    self.gkd["bw_parsimony"], norm=self.smooth_norm,
                    kernel=kern)
                loss_p += lam * pl
                touched[name].append(self._pars_candidates)
                if name == "roughness":
                    g["roughness"] += lam * pg[:, 0]
                else:
                    g[name] += lam * pg

        if "env" in trainable and w.env_smooth > 0:
            loss_env, g_env_smooth = _env.env_smooth_loss(env, with_grad=True)
            env_acc[0] += w.env_smooth * g_env_smooth
            loss_p += w.env_smooth * loss_env

        total = w.render * loss_r + lam_c * loss_c_total + loss_p
        if not np.isfinite(total):
            raise NonFiniteLoss(f"non-finite loss at stage {stage}: "
                                f"R={loss_r} C={loss_c_total} P={loss_p}")

        # chain rule into unconstrained parameters, only for trainables and
        # only on the rows any loss term touched
        rows = {name: np.unique(np.concatenate(parts))
                for name, parts in touched.items()}
        grads = {}
        if "albedo" in trainable:
            r = rows["albedo"]
            ga = np.zeros_like(g["albedo"])
            a = albedo[r]
            ga[r] = g["albedo"][r] * a * (1 - a)
            grads["albedo"] = ga
        if "roughness" in trainable:
            r = rows["roughness"]
            gr = np.zeros_like(g["roughness"])
            s = _sigmoid(self.params["roughness"][r])
            gr[r] = g["roughness"][r] * (1 - 2 * ROUGHNESS_EPS) * s * (1 - s)
            grads["roughness"] = gr
        if "visibility" in trainable:
            r = rows["visibility"]
            gv = np.zeros_like(g["visibility"])
            vb = vis[r]
            gv[r] = g["visibility"][r] * vb * (1 - vb)
            grads["visibility"] = gv
        if "normal" in trainable:
            r = rows["normal"]
            gn = np.zeros_like(g["normal"])
            nb = normals[r]
            gb = g["normal"][r]
            gn[r] = gb - np.sum(gb * nb, axis=1, keepdims=True) * nb
            grads["normal"] = gn
        if "env" in trainable:
            g_env0 = _env.collapse_mip_gradient(env, env_acc)
            grads["env"] = g_env0 * np.exp(self.params["env"])

        frozen["rows"] = rows
        losses = {"total": total, "render": loss_r,
                  "commitment": loss_c_total, "priors": loss_p,
                  "mse": loss_r / 3.0}
        return losses, grads, frozen

    def _step(self, batch, stage: str, epoch: int, rng) -> dict[str, float]:
        losses, grads, frozen = self.loss_and_grads(batch, stage, epoch, rng)
        rows = frozen["rows"]
        self.optimizer.step(self.params, grads,
                            rows={k: rows.get(k) for k in grads})
        cache = self._cache
        for name in ("albedo", "visibility"):
            if name in grads:
                r = rows[name]
                cache[name][r] = _sigmoid(self.params[name][r])
        if "roughness" in grads:
            r = rows["roughness"]
            cache["roughness"][r] = ROUGHNESS_EPS \
                + (1 - 2 * ROUGHNESS_EPS) * _sigmoid(
                    self.params["roughness"][r])
        if "normal" in grads:
            r = rows["normal"]
            nrm = self.params["normal"]
            nrm[r] /= np.maximum(
                np.linalg.norm(nrm[r], axis=1, keepdims=True), 1e-12)
        return losses

    # -- stages ---------------------------------------------------------------

    def run(self, log_fn=None) -> list[EpochMetrics]:
        stages = (
            ("stage_a", self.schedule.stage_a_epochs),
            ("warmup", self.schedule.warmup_epochs),
            ("joint", self.schedule.joint_epochs),
        )
        n = len(self.data.observed)
        bs = min(self.schedule.batch_size, n)
        epoch_global = 0
        for stage, n_epochs in stages:
            for _ in range(n_epochs):
                rng_epoch = np.random.default_rng(
                    [self.seed, 55, epoch_global])
                if stage == "stage_a":
                    attrs = tuple(a for a in self.smooth_attrs
                                  if a in ("normal", "visibility"))
                else:
                    attrs = self.smooth_attrs
                self._rebuild_trees(epoch_global, attrs, rng_epoch)
                perm = rng_epoch.permutation(n)
                sums = {"total": 0.0, "render": 0.0, "commitment": 0.0,
                        "priors": 0.0, "mse": 0.0}
                n_steps = 0
                for s0 in range(0, n, bs):
                    batch = perm[s0:s0 + bs]
                    rng = np.random.default_rng(
                        [self.seed, 1000, epoch_global, n_steps])
                    out = self._step(batch, stage, epoch_global, rng)
                    for k in sums:
                        sums[k] += out[k]
                    n_steps += 1
                mse = max(sums["mse"] / n_steps, 1e-12)
                em = EpochMetrics(
                    epoch=epoch_global, stage=stage,
                    total=sums["total"] / n_steps,
                    render=sums["render"] / n_steps,
                    commitment=sums["commitment"] / n_steps,
                    priors=sums["priors"] / n_steps,
                    psnr=-10.0 * np.log10(mse),
                )
                self.metrics.append(em)
                if log_fn:
                    log_fn(em)
                epoch_global += 1
        self.sync_cloud()
        return self.metrics


def run_decomposition(grid: DensityGrid, images, cameras,
                      schedule: StageSchedule | None = None,
                      weights: LossWeights | None = None,
                      config: RenderConfig | None = None,
                      seed: int = 0, masks=None,
                      env_resolution: int = _env.DEFAULT_RESOLUTION,
                      tree: _oct.Octree | None = None,
                      log_fn=None, **decomposer_kwargs):
    """End-to-end decomposition; returns (cloud, env, metrics, decomposer).

    Raises NoSurface when no input ray yields a surfel and NonFiniteLoss if
    the objective diverges.
    """
    if len(cameras) < 2:
        raise ValueError("need at least 2 input views")
    schedule = schedule or StageSchedule()
    weights = weights or LossWeights()
    config = config or RenderConfig()
    if tree is None:
        tree = _oct.build_octree(grid)
    data = extract_training_surfels(grid, tree, cameras, images, masks,
                                    config)
    dec = Decomposer(grid, tree, data, weights, schedule, config, seed,
                     env_resolution, **decomposer_kwargs)
    metrics = dec.run(log_fn=log_fn)
    return dec.sync_cloud(), dec.env_map(), metrics, dec


def metrics_to_csv(metrics: list[EpochMetrics]) -> str:
    lines = ["epoch,stage,total,R,C,P,PSNR"]
    for m in metrics:
        lines.append(f"{m.epoch},{m.stage},{m.total!r},{m.render!r},"
                     f"{m.commitment!r},{m.priors!r},{m.psnr!r}")
    return "\n".join(lines) + "\n"
