"""Environment lighting as an HDR cube map with a box-filtered mip chain.

Lookups select a mip level so the texel footprint matches the solid angle
of the Monte-Carlo sample that produced the query:

    level = max(0.5 * log2(omega_s / omega_p), 0)
    omega_s = 1 / (N * pdf)
    omega_p = (4 / W^2) / (u^2 + v^2 + 1)^(3/2)

Face seams are made continuous by averaging matched edge texels at the
base level only, so box filtering preserves per-face mean radiance at
every level exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .pfm import load_pfm, save_pfm

DEFAULT_RESOLUTION = 16
FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")


# ---------------------------------------------------------------------------
# direction <-> face/uv mapping


def dir_to_face_uv(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map unit directions to (face index, u, v) with u, v in [-1, 1]."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    ax, ay, az = np.abs(d[:, 0]), np.abs(d[:, 1]), np.abs(d[:, 2])
    face = np.where(
        (ax >= ay) & (ax >= az),
        np.where(d[:, 0] >= 0, 0, 1),
        np.where(
            ay >= az,
            np.where(d[:, 1] >= 0, 2, 3),
            np.where(d[:, 2] >= 0, 4, 5),
        ),
    )
    major = np.choose(face, [ax, ax, ay, ay, az, az])
    major = np.maximum(major, 1e-300)
    x, y, z = d[:, 0] / major, d[:, 1] / major, d[:, 2] / major
    u = np.choose(face, [-z, z, x, x, x, -x])
    v = np.choose(face, [-y, -y, z, -z, -y, -y])
    return face.astype(np.int64), u, v


def face_uv_to_dir(face, u, v) -> np.ndarray:
    """Inverse of dir_to_face_uv (returns unit directions)."""
    face = np.atleast_1d(np.asarray(face, dtype=np.int64))
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    ones = np.ones_like(u)
    comps = [
        np.stack([ones, -v, -u], axis=1),
        np.stack([-ones, -v, u], axis=1),
        np.stack([u, ones, v], axis=1),
        np.stack([u, -ones, -v], axis=1),
        np.stack([u, -v, ones], axis=1),
        np.stack([-u, -v, -ones], axis=1),
    ]
    out = np.empty((len(u), 3))
    for f in range(6):
        sel = face == f
        out[sel] = comps[f][sel]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def face_texel_dirs(face: int, w: int) -> np.ndarray:
    """Unit directions of all texel centers of one face, shape (w, w, 3)."""
    centers = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    uu, vv = np.meshgrid(centers, centers, indexing="xy")
    d = face_uv_to_dir(np.full(uu.size, face), uu.ravel(), vv.ravel())
    return d.reshape(w, w, 3)


# ---------------------------------------------------------------------------
# seam groups (computed once per resolution)

_SEAM_CACHE: dict[int, list[np.ndarray]] = {}


def _seam_groups(w: int) -> list[np.ndarray]:
    """Groups of flat texel ids (face * w * w + iv * w + iu) that meet at
    face seams; every group is averaged to its mean."""
    if w in _SEAM_CACHE:
        return _SEAM_CACHE[w]
    parent = np.arange(6 * w * w)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    centers = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    eps = 1.0 / w  # push far enough to cross onto the neighbor face
    for face in range(6):
        for edge in range(4):
            t = centers
            if edge == 0:    # u = -1
                uu, vv = np.full(w, -1.0 - eps), t
            elif edge == 1:  # u = +1
                uu, vv = np.full(w, 1.0 + eps), t
            elif edge == 2:  # v = -1
                uu, vv = t, np.full(w, -1.0 - eps)
            else:            # v = +1
                uu, vv = t, np.full(w, 1.0 + eps)
            d = face_uv_to_dir(np.full(w, face), uu, vv)
            nf, nu, nv = dir_to_face_uv(d)
            niu = np.clip(((nu + 1) * 0.5 * w).astype(np.int64), 0, w - 1)
            niv = np.clip(((nv + 1) * 0.5 * w).astype(np.int64), 0, w - 1)
            if edge == 0:
                iu, iv = np.zeros(w, dtype=np.int64), np.arange(w)
            elif edge == 1:
                iu, iv = np.full(w, w - 1), np.arange(w)
            elif edge == 2:
                iu, iv = np.arange(w), np.zeros(w, dtype=np.int64)
            else:
                iu, iv = np.arange(w), np.full(w, w - 1)
            own = face * w * w + iv * w + iu
            other = nf * w * w + niv * w + niu
            for a, b in zip(own, other):
                union(int(a), int(b))

    roots = np.array([find(i) for i in range(6 * w * w)])
    groups = []
    for r in np.unique(roots):
        members = np.nonzero(roots == r)[0]
        if len(members) > 1:
            groups.append(members)
    _SEAM_CACHE[w] = groups
    return groups


def seam_average(faces: np.ndarray) -> np.ndarray:
    """Average matched seam texels (symmetric linear operator)."""
    w = faces.shape[1]
    flat = faces.reshape(6 * w * w, -1).copy()
    for g in _seam_groups(w):
        flat[g] = flat[g].mean(axis=0)
    return flat.reshape(faces.shape)


# ---------------------------------------------------------------------------


@dataclass
class Footprint:
    """Texel footprint of a batch of lookups, for gradient accumulation.

    Each lookup touches 4 texels at each of two adjacent mip levels; the
    stored weights are bilinear weights already scaled by the level blend,
    so radiance = sum(weights * texels) exactly.
    """

    face: np.ndarray     # (m,)
    levels: np.ndarray   # (m, 2) the two blended mip levels
    iu: np.ndarray       # (m, 2, 4)
    iv: np.ndarray       # (m, 2, 4)
    weights: np.ndarray  # (m, 2, 4)


class EnvCubeMap:
    """Six square HDR faces plus a box-filter mip chain down to 1x1."""

    def __init__(self, faces: np.ndarray, seam_blend: bool = True):
        faces = np.asarray(faces, dtype=np.float64)
        if faces.shape[0] != 6 or faces.shape[1] != faces.shape[2]:
            raise ValueError("faces must have shape (6, W, W, 3)")
        w = faces.shape[1]
        if w & (w - 1) != 0:
            raise ValueError("resolution must be a power of two")
        if np.any(faces < 0):
            raise ValueError("radiance must be non-negative")
        self.raw = faces
        self.seam_blend = seam_blend
        self.mips: list[np.ndarray] = []
        self.rebuild()

    @classmethod
    def constant(cls, value, resolution: int = DEFAULT_RESOLUTION) -> "EnvCubeMap":
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        faces = np.broadcast_to(
            value, (6, resolution, resolution, 3)).copy()
        return cls(faces)

    @classmethod
    def from_function(cls, fn, resolution: int = DEFAULT_RESOLUTION) -> "EnvCubeMap":
        """Bake an analytic radiance function L(direction) -> rgb."""
        faces = np.empty((6, resolution, resolution, 3))
        for f in range(6):
            d = face_texel_dirs(f, resolution).reshape(-1, 3)
            faces[f] = np.maximum(fn(d), 0.0).reshape(resolution, resolution, 3)
        return cls(faces)

    @property
    def resolution(self) -> int:
        return self.raw.shape[1]

    @property
    def n_levels(self) -> int:
        return len(self.mips)

    def rebuild(self) -> None:
        base = seam_average(self.raw) if self.seam_blend else self.raw.copy()
        mips = [base]
        while mips[-1].shape[1] > 1:
            mips.append(_box_down(mips[-1]))
        # store the chain in one flat buffer (per-level views share it) so
        # the compiled lookup kernel can address every level directly
        sizes = [m.size for m in mips]
        self.level_offsets = np.concatenate(
            [[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.level_res = np.asarray([m.shape[1] for m in mips],
                                    dtype=np.int64)
        self.flat_mips = np.concatenate([m.ravel() for m in mips])
        self.mips = [
            self.flat_mips[off:off + size].reshape(m.shape)
            for off, size, m in zip(self.level_offsets, sizes, mips)
        ]

    def scaled(self, s) -> "EnvCubeMap":
        return EnvCubeMap(self.raw * np.asarray(s, dtype=np.float64),
                          seam_blend=self.seam_blend)


def _box_down(faces: np.ndarray) -> np.ndarray:
    w = faces.shape[1] // 2
    return faces.reshape(6, w, 2, w, 2, 3).mean(axis=(2, 4))


def _box_up(faces: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(faces, 2, axis=1), 2, axis=2)


def mip_level(n_samples: int, pdf, width: int, u, v,
              n_levels: int | None = None):
    """Mip level matching the sample solid angle (see module docstring)."""
    pdf = np.asarray(pdf, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    omega_s = 1.0 / (n_samples * np.maximum(pdf, 1e-300))
    dA = 1.0 / (u * u + v * v + 1.0) ** 1.5
    omega_p = (4.0 / (width * width)) * dA
    level = np.maximum(0.5 * np.log2(omega_s / omega_p), 0.0)
    if n_levels is not None:
        level = np.minimum(level, n_levels - 1.0)
    return level


def _bilinear_setup(u, v, w):
    """Texel indices and weights for clamp-to-edge bilinear at one level."""
    pu = np.clip((u + 1.0) * 0.5 * w - 0.5, 0.0, w - 1.0)
    pv = np.clip((v + 1.0) * 0.5 * w - 0.5, 0.0, w - 1.0)
    iu0 = np.minimum(pu.astype(np.int64), max(w - 2, 0))
    iv0 = np.minimum(pv.astype(np.int64), max(w - 2, 0))
    fu = pu - iu0
    fv = pv - iv0
    iu1 = np.minimum(iu0 + 1, w - 1)
    iv1 = np.minimum(iv0 + 1, w - 1)
    ius = np.stack([iu0, iu1, iu0, iu1], axis=1)
    ivs = np.stack([iv0, iv0, iv1, iv1], axis=1)
    ws = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1
    )
    return ius, ivs, ws


def sample_env(env: EnvCubeMap, dirs, level,
               with_footprint: bool = False, face_uv=None):
    """Trilinear (bilinear in face, linear across mips) radiance lookup.

    ``level`` may be fractional; it is clamped to the available mip range.
    With ``with_footprint`` the returned Footprint lets callers scatter
    d(loss)/d(radiance) into per-level accumulators.  ``face_uv`` skips the
    direction-to-face mapping when the caller already has it.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    m = len(dirs)
    level = np.broadcast_to(np.asarray(level, dtype=np.float64), (m,))
    level = np.clip(level, 0.0, env.n_levels - 1.0)
    face, u, v = dir_to_face_uv(dirs) if face_uv is None else face_uv
    if _kernels.env_gather is not None:
        out, lvl_rec, iu_rec, iv_rec, w_rec = _kernels.env_gather(
            env.flat_mips, env.level_offsets, env.level_res, face, u, v,
            level)
        if not with_footprint:
            return out
        return out, Footprint(face=face, levels=lvl_rec, iu=iu_rec,
                              iv=iv_rec, weights=w_rec)
    l0 = level.astype(np.int64)
    l1 = np.minimum(l0 + 1, env.n_levels - 1)
    blend = level - l0

    out = np.zeros((m, 3))
    iu_rec = np.zeros((m, 2, 4), dtype=np.int64)
    iv_rec = np.zeros((m, 2, 4), dtype=np.int64)
    w_rec = np.zeros((m, 2, 4))
    lvl_rec = np.zeros((m, 2), dtype=np.int64)
    for slot, (lv, scale) in enumerate((
            (l0, 1.0 - blend), (l1, blend))):
        for lev in np.unique(lv):
            sel = np.nonzero(lv == lev)[0]
            if len(sel) == 0:
                continue
            wres = env.mips[lev].shape[1]
            ius, ivs, ws = _bilinear_setup(u[sel], v[sel], wres)
            tex = env.mips[lev][face[sel, None], ivs, ius]  # (k, 4, 3)
            ws_scaled = ws * scale[sel, None]
            out[sel] += np.sum(ws_scaled[:, :, None] * tex, axis=1)
            iu_rec[sel, slot] = ius
            iv_rec[sel, slot] = ivs
            w_rec[sel, slot] = ws_scaled
            lvl_rec[sel, slot] = lev
    if not with_footprint:
        return out
    fp = Footprint(face=face, levels=lvl_rec, iu=iu_rec, iv=iv_rec,
                   weights=w_rec)
    return out, fp


class EnvAccumulator:
    """Per-level texel-gradient accumulators backed by one flat buffer,
    enabling the compiled scatter kernel; indexes like a list of arrays."""

    def __init__(self, env: EnvCubeMap):
        self.flat = np.zeros_like(env.flat_mips)
        sizes = [m.size for m in env.mips]
        self.views = [
            self.flat[o:o + s].reshape(m.shape)
            for o, s, m in zip(env.level_offsets, sizes, env.mips)
        ]

    def __getitem__(self, i):
        return self.views[i]

    def __len__(self):
        return len(self.views)


def scatter_env_gradient(env: EnvCubeMap, fp: Footprint, dL_drgb: np.ndarray,
                         accumulators) -> None:
    """Accumulate d(loss)/d(mip texel) for a batch of lookups.

    ``accumulators`` is a list of per-level arrays shaped like
    ``env.mips``, or an EnvAccumulator (which enables the compiled path).
    """
    dL = np.atleast_2d(dL_drgb)
    if isinstance(accumulators, EnvAccumulator) \
            and _kernels.env_scatter is not None:
        _kernels.env_scatter(accumulators.flat, env.level_offsets,
                             env.level_res, fp.face, fp.levels, fp.iu,
                             fp.iv, fp.weights, dL)
        return
    for slot in range(2):
        levels = fp.levels[:, slot]
        for lev in np.unique(levels):
            sel = np.nonzero(levels == lev)[0]
            w = fp.weights[sel, slot]  # (k, 4)
            acc = accumulators[lev]
            wres = acc.shape[1]
            flat = ((fp.face[sel, None] * wres + fp.iv[sel, slot]) * wres
                    + fp.iu[sel, slot]).ravel()
            size = 6 * wres * wres
            for c in range(3):
                contrib = (w * dL[sel, c][:, None]).ravel()
                acc[:, :, :, c] += np.bincount(
                    flat, weights=contrib, minlength=size
                ).reshape(6, wres, wres)


def collapse_mip_gradient(env: EnvCubeMap, accumulators: list[np.ndarray]
                          ) -> np.ndarray:
    """Fold per-level gradients down to the raw base-level texels.

    Box filtering spreads each coarse gradient uniformly over its 2x2
    source block; the seam averaging operator is symmetric, so it applies
    unchanged to gradients.
    """
    g = accumulators[-1].copy()
    for lev in range(len(accumulators) - 2, -1, -1):
        g = _box_up(g) / 4.0 + accumulators[lev]
    if env.seam_blend:
        g = seam_average(g)
    return g


def env_smooth_loss(env: EnvCubeMap, with_grad: bool = False):
    """Mean squared residual between mip level 0 and upsampled level 1."""
    l0 = env.mips[0]
    l1_up = _box_up(env.mips[1])
    r = l0 - l1_up
    loss = float(np.mean(r**2))
    if not with_grad:
        return loss
    n = r.size
    # (I - U B)^T r = r - B^T U^T r; U^T is a 2x2 block sum, B^T spreads /4
    block_sum = r.reshape(6, r.shape[1] // 2, 2, r.shape[2] // 2, 2, 3).sum(
        axis=(2, 4))
    grad = (2.0 / n) * (r - _box_up(block_sum) / 4.0)
    if env.seam_blend:
        grad = seam_average(grad)
    return loss, grad


def save_env_cross(path, env: EnvCubeMap) -> None:
    """Single-file 4W x 3W cross layout (see docs/formats.md)."""
    w = env.resolution
    canvas = np.zeros((3 * w, 4 * w, 3), dtype=np.float32)
    placement = {2: (0, 1), 1: (1, 0), 4: (1, 1), 0: (1, 2), 5: (1, 3), 3: (2, 1)}
    for face, (row, col) in placement.items():
        canvas[row * w:(row + 1) * w, col * w:(col + 1) * w] = env.raw[face]
    save_pfm(path, canvas)


def load_env_cross(path) -> EnvCubeMap:
    canvas = load_pfm(path)
    h, w3 = canvas.shape[:2]
    w = w3 // 4
    if h != 3 * w:
        raise ValueError("cross-layout PFM must be 4W x 3W")
    placement = {2: (0, 1), 1: (1, 0), 4: (1, 1), 0: (1, 2), 5: (1, 3), 3: (2, 1)}
    faces = np.zeros((6, w, w, 3))
    for face, (row, col) in placement.items():
        faces[face] = canvas[row * w:(row + 1) * w, col * w:(col + 1) * w]
    return EnvCubeMap(faces)


def save_env_faces(prefix, env: EnvCubeMap) -> None:
    """Six PFM files named <prefix>_{px,nx,py,ny,pz,nz}.pfm."""
    tags = ("px", "nx", "py", "ny", "pz", "nz")
    for f, tag in enumerate(tags):
        save_pfm(f"{prefix}_{tag}.pfm", env.raw[f])


def load_env_faces(prefix) -> EnvCubeMap:
    tags = ("px", "nx", "py", "ny", "pz", "nz")
    faces = np.stack([load_pfm(f"{prefix}_{tag}.pfm") for tag in tags])
    return EnvCubeMap(faces)
