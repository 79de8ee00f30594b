"""Octree over the density grid: empty-space skipping for transmittance and
hemisphere light-visibility queries, plus the surfel kNN index.

Each node stores the exact max density over its covered voxels and a
stencil-aware "support max" over the one-voxel-inflated range.  A region is
skippable only when the support max is zero, which guarantees the trilinear
field is exactly zero everywhere inside it, so skipping never changes
marched values, only evaluation counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from . import _kernels
from .grids import DensityGrid, Ray
from .surface import STEPS_PER_UNIT

MAX_DEPTH = 8
LEAF_BRICK = 4
VIS_OFFSET_VOXELS = 2.0


@dataclass
class Octree:
    grid: DensityGrid
    children: np.ndarray   # (n_nodes, 8) int32, -1 = absent
    lo: np.ndarray         # (n_nodes, 3) int32 voxel bounds, inclusive
    hi: np.ndarray         # (n_nodes, 3) int32 voxel bounds, exclusive
    max_sigma: np.ndarray  # (n_nodes,) float32: max density over covered voxels
    support_max: np.ndarray
    skip: np.ndarray       # (n_nodes,) uint8: 1 where support_max == 0
    depth: np.ndarray      # (n_nodes,) int32

    @property
    def n_nodes(self) -> int:
        return len(self.children)

    def kernel_view(self):
        return (self.children, self.lo, self.hi, self.skip)

    def is_leaf(self, i: int) -> bool:
        return bool(np.all(self.children[i] < 0))


def build_octree(grid: DensityGrid, max_depth: int = MAX_DEPTH,
                 leaf_brick: int = LEAF_BRICK) -> Octree:
    """Subdivide until bricks of ``leaf_brick``^3 voxels or ``max_depth``;
    all-zero subtrees collapse to leaves."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    sigma = grid.sigma
    dims = np.asarray(sigma.shape)
    support = maximum_filter(sigma, size=3, mode="nearest")

    children: list[np.ndarray] = []
    los: list[np.ndarray] = []
    his: list[np.ndarray] = []
    max_sig: list[float] = []
    sup_max: list[float] = []
    depths: list[int] = []

    def add_node(lo, hi, depth) -> int:
        idx = len(children)
        children.append(np.full(8, -1, dtype=np.int32))
        los.append(np.asarray(lo, dtype=np.int32))
        his.append(np.asarray(hi, dtype=np.int32))
        block = sigma[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        max_sig.append(float(block.max()))
        sup_max.append(float(support[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].max()))
        depths.append(depth)
        return idx

    def subdivide(idx: int):
        lo, hi, depth = los[idx], his[idx], depths[idx]
        if max_sig[idx] == 0.0:
            return  # all-zero subtree collapses
        if depth >= max_depth or np.all(hi - lo <= leaf_brick):
            return
        mid = (lo + hi) // 2
        slot = 0
        for bx in range(2):
            for by in range(2):
                for bz in range(2):
                    c_lo = np.array(
                        [lo[0] if bx == 0 else mid[0],
                         lo[1] if by == 0 else mid[1],
                         lo[2] if bz == 0 else mid[2]])
                    c_hi = np.array(
                        [mid[0] if bx == 0 else hi[0],
                         mid[1] if by == 0 else hi[1],
                         mid[2] if bz == 0 else hi[2]])
                    if np.any(c_hi <= c_lo):
                        slot += 1
                        continue
                    ci = add_node(c_lo, c_hi, depth + 1)
                    children[idx][slot] = ci
                    subdivide(ci)
                    slot += 1

    root = add_node(np.zeros(3, dtype=np.int64), dims, 0)
    subdivide(root)
    sup = np.asarray(sup_max, dtype=np.float32)
    return Octree(
        grid=grid,
        children=np.stack(children).astype(np.int32),
        lo=np.stack(los),
        hi=np.stack(his),
        max_sigma=np.asarray(max_sig, dtype=np.float32),
        support_max=sup,
        skip=(sup == 0.0).astype(np.uint8),
        depth=np.asarray(depths, dtype=np.int32),
    )


def transmittance_fast(tree: Octree, ray: Ray,
                       steps_per_unit: int = STEPS_PER_UNIT) -> float:
    """End value of the opacity profile, skipping provably empty regions."""
    depth, _ = _kernels.march_octree(
        tree.grid.sigma, tree.grid.origin, tree.grid.voxel_size,
        tree.kernel_view(),
        ray.origin, ray.direction, ray.t_near, ray.t_far, steps_per_unit,
    )
    return float(-np.expm1(-depth[0]))


def transmittance_fast_batch(tree: Octree, origins, dirs, tn, tf,
                             steps_per_unit: int = STEPS_PER_UNIT
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Batched end-value transmittance; returns (T, density_eval_counts)."""
    depth, counts = _kernels.march_octree(
        tree.grid.sigma, tree.grid.origin, tree.grid.voxel_size,
        tree.kernel_view(), origins, dirs, tn, tf, steps_per_unit,
    )
    return -np.expm1(-depth), counts


def visibility(tree: Octree, x_s, omega,
               offset_voxels: float = VIS_OFFSET_VOXELS,
               steps_per_unit: int = STEPS_PER_UNIT) -> float:
    """Fraction of far-field light transmitted toward direction ``omega``.

    Integrates from the self-occlusion offset point to the grid box exit;
    1.0 when nothing is hit.
    """
    vis, _ = _kernels.visibility(
        tree.grid.sigma, tree.grid.origin, tree.grid.voxel_size,
        tree.kernel_view(),
        np.asarray(x_s, dtype=np.float64), np.asarray(omega, dtype=np.float64),
        offset_voxels * tree.grid.voxel_size, steps_per_unit,
    )
    return float(vis[0])


def visibility_batch(tree: Octree, pts, dirs,
                     offset_voxels: float = VIS_OFFSET_VOXELS,
                     steps_per_unit: int = STEPS_PER_UNIT) -> np.ndarray:
    vis, _ = _kernels.visibility(
        tree.grid.sigma, tree.grid.origin, tree.grid.voxel_size,
        tree.kernel_view(), pts, dirs,
        offset_voxels * tree.grid.voxel_size, steps_per_unit,
    )
    return vis


def knn_surfels(cloud, x, k: int):
    """Exact k nearest surfels by Euclidean distance: (distances, indices)."""
    if len(cloud) == 0:
        raise ValueError("surfel cloud is empty")
    kq = min(k, len(cloud))
    d, i = cloud.knn_index().query(np.asarray(x, dtype=np.float64), k=kq)
    return np.atleast_1d(d), np.atleast_1d(i)
