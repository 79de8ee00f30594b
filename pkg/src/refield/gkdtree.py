"""Gaussian KD-tree over per-surfel feature vectors.

Supports kernel-proportional stochastic neighbor sampling for the bilateral
smoothness prior and K-means candidate selection for the albedo parsimony
prior.  The kernel is exp(-|v_i - v_j|^2) with bandwidths divided into the
features at construction time, so position and attribute blocks each carry
their own scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import StaleTree, TooFewPoints

LEAF_SIZE = 8
NEIGHBOR_SAMPLES = 8
KMEANS_K = 16
KEEP_PER_CLUSTER = 4

# default bandwidths (position one is in voxels, scaled by the caller)
BW_POSITION_VOXELS = 3.0
BW_NORMAL = 0.3
BW_ALBEDO = 0.15
BW_ROUGHNESS = 0.1
BW_VISIBILITY = 0.5
BW_PARSIMONY = 0.2


def smoothness_features(positions, values, pos_bandwidth, value_bandwidth):
    """Bilateral feature block (x / sigma_x, f / sigma_f)."""
    pos = np.asarray(positions, dtype=np.float64) / pos_bandwidth
    val = np.atleast_2d(np.asarray(values, dtype=np.float64).T).T / value_bandwidth
    if val.ndim == 1:
        val = val[:, None]
    return np.concatenate([pos, val.reshape(len(pos), -1)], axis=1)


def kernel_value(v_i, v_j) -> np.ndarray:
    d = np.asarray(v_i, dtype=np.float64) - np.asarray(v_j, dtype=np.float64)
    return np.exp(-np.sum(np.atleast_2d(d) ** 2, axis=1))


@dataclass
class GaussianKdTree:
    feats: np.ndarray     # (n, D) bandwidth-scaled feature vectors
    left: np.ndarray      # (n_nodes,) int64, -1 for leaves
    right: np.ndarray
    start: np.ndarray     # [start, end) range into ``order`` per node
    end: np.ndarray
    box_lo: np.ndarray    # (n_nodes, D) tight point bounds
    box_hi: np.ndarray
    order: np.ndarray     # permutation of point indices
    pos_in_order: np.ndarray  # inverse permutation (point -> slot)
    max_depth: int
    epoch: int = 0

    def __len__(self) -> int:
        return len(self.feats)


def build_gkdtree(points: np.ndarray, leaf_size: int = LEAF_SIZE,
                  epoch: int = 0) -> GaussianKdTree:
    """Balanced median-split tree on the widest dimension per node.

    Split structure is built top-down; the per-node bounding boxes are
    filled bottom-up afterwards (leaf boxes by segmented reduction,
    internal boxes by merging children), which keeps the Python loop light.
    """
    feats = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    n = len(feats)
    if n < 2:
        raise TooFewPoints("need at least 2 feature points")
    order = np.arange(n, dtype=np.int64)

    left, right, starts, ends, depths = [], [], [], [], []

    def add_node(s, e, depth):
        idx = len(left)
        left.append(-1)
        right.append(-1)
        starts.append(s)
        ends.append(e)
        depths.append(depth)
        return idx

    stack = [(add_node(0, n, 0), 0, n, 0)]
    while stack:
        node, s, e, depth = stack.pop()
        if e - s <= leaf_size:
            continue
        sub = order[s:e]
        pts = feats[sub]
        widths = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(widths))
        mid = s + (e - s) // 2
        part = np.argpartition(pts[:, dim], mid - s)
        order[s:e] = sub[part]
        li = add_node(s, mid, depth + 1)
        ri = add_node(mid, e, depth + 1)
        left[node] = li
        right[node] = ri
        stack.append((li, s, mid, depth + 1))
        stack.append((ri, mid, e, depth + 1))

    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    depths = np.asarray(depths, dtype=np.int64)

    n_nodes = len(left)
    d = feats.shape[1]
    box_lo = np.empty((n_nodes, d))
    box_hi = np.empty((n_nodes, d))
    leaves = np.nonzero(left == -1)[0]
    sorted_feats = feats[order]
    # leaf segments tile [0, n), so reduceat over sorted starts reduces
    # each leaf exactly
    srt = np.argsort(starts[leaves], kind="stable")
    lo_seg = np.minimum.reduceat(sorted_feats, starts[leaves][srt], axis=0)
    hi_seg = np.maximum.reduceat(sorted_feats, starts[leaves][srt], axis=0)
    box_lo[leaves[srt]] = lo_seg
    box_hi[leaves[srt]] = hi_seg
    for depth in range(int(depths.max()) - 1, -1, -1):
        sel = np.nonzero((depths == depth) & (left >= 0))[0]
        if len(sel) == 0:
            continue
        box_lo[sel] = np.minimum(box_lo[left[sel]], box_lo[right[sel]])
        box_hi[sel] = np.maximum(box_hi[left[sel]], box_hi[right[sel]])

    return GaussianKdTree(
        feats=feats,
        left=left,
        right=right,
        start=starts,
        end=ends,
        box_lo=box_lo,
        box_hi=box_hi,
        order=order,
        pos_in_order=np.argsort(order),
        max_depth=int(depths.max()),
        epoch=epoch,
    )


def sample_neighbors(tree: GaussianKdTree, i: int, m: int, rng
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw m approximately kernel-proportional neighbors of point i.

    Returns (indices, kernel_values, proposal_pdfs); the query itself is
    never drawn.  Kernel values are exact for the drawn neighbors; the pdf
    is the exact probability the sampler assigned to each draw, which makes
    importance-corrected estimators of kernel sums unbiased.
    """
    idx, kv, pdf = sample_neighbors_batch(tree, np.asarray([i]), m, rng)
    return idx[0], kv[0], pdf[0]


def sample_neighbors_batch(tree: GaussianKdTree, queries, m: int, rng):
    queries = np.asarray(queries, dtype=np.int64)
    uniforms = rng.random((len(queries), m, tree.max_depth + 1))
    return _kernels.gkd_sample(
        tree.left, tree.right, tree.start, tree.end,
        tree.box_lo, tree.box_hi, tree.order, tree.feats,
        queries, m, uniforms, tree.pos_in_order,
    )


def smoothness_loss(values, tree: GaussianKdTree, batch_indices, m: int, rng,
                    epoch: int | None = None, norm: str = "l1",
                    draws=None) -> tuple[float, np.ndarray]:
    """Stochastic bilateral smoothness prior over a batch of points.

    Monte-Carlo estimate of mean_i sum_j k(v_i, v_j) |f_j - f_i| using m
    kernel-proportional draws per batch point with importance correction.
    Gradients flow to both endpoints of every drawn pair; the kernel weight
    is treated as a constant.  ``draws`` replays a previous (idx, kval,
    pdf) sample set instead of drawing.

    Returns (loss, gradient wrt ``values``).
    """
    if epoch is not None and abs(epoch - tree.epoch) > 1:
        raise StaleTree(
            f"tree epoch {tree.epoch} is stale for optimization epoch {epoch}")
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(len(values), -1)
    batch = np.asarray(batch_indices, dtype=np.int64)
    if draws is None:
        idx, kv, pdf = sample_neighbors_batch(tree, batch, m, rng)
    else:
        idx, kv, pdf = draws

    w = kv / np.maximum(pdf, 1e-300) / (m * len(batch))
    fi = flat[batch][:, None, :]
    fj = flat[idx]
    diff = fj - fi
    if norm == "l1":
        loss = float(np.sum(w * np.sum(np.abs(diff), axis=2)))
        g = w[:, :, None] * np.sign(diff)
    elif norm == "l2":
        mag = np.sqrt(np.sum(diff**2, axis=2))
        loss = float(np.sum(w * mag))
        g = w[:, :, None] * diff / np.maximum(mag, 1e-12)[:, :, None]
    else:
        raise ValueError(f"unknown norm {norm!r}")
    g2 = g.reshape(-1, flat.shape[1])
    grad = _scatter_signed(idx.ravel(), np.repeat(batch, m), g2, len(flat))
    return loss, grad.reshape(values.shape)


def smoothness_loss_brute(values, feats, norm: str = "l1") -> float:
    """O(N^2) oracle: mean_i sum_{j != i} k(v_i, v_j) |f_j - f_i|."""
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(len(values), -1)
    feats = np.asarray(feats, dtype=np.float64)
    n = len(flat)
    total = 0.0
    for i in range(n):
        k = np.exp(-np.sum((feats - feats[i]) ** 2, axis=1))
        k[i] = 0.0
        if norm == "l1":
            r = np.sum(np.abs(flat - flat[i]), axis=1)
        else:
            r = np.sqrt(np.sum((flat - flat[i]) ** 2, axis=1))
        total += float(np.sum(k * r))
    return total / n


def kmeans(points: np.ndarray, k: int, rng, tol: float = 1e-5,
           max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centers, labels); converged when no center moves more than tol.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    if k < 1 or n < k:
        raise ValueError("need k >= 1 and at least k points")
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            centers[c:] = centers[0]
            break
        probs = d2 / tot
        centers[c] = pts[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((pts - centers[c]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        moved = 0.0
        for c in range(k):
            sel = labels == c
            if sel.any():
                new = pts[sel].mean(axis=0)
                moved = max(moved, float(np.linalg.norm(new - centers[c])))
                centers[c] = new
        if moved <= tol:
            break
    return centers, labels


def parsimony_candidates(albedos, k: int = KMEANS_K,
                         keep_per_cluster: int = KEEP_PER_CLUSTER,
                         rng=None, max_points: int | None = None
                         ) -> np.ndarray:
    """Cluster albedo colors and keep a few random members per cluster.

    ``max_points`` caps the K-means input by uniform subsampling (the
    candidates are then drawn from the subsample), which bounds the
    per-epoch clustering cost on large clouds.
    """
    albedos = np.atleast_2d(np.asarray(albedos, dtype=np.float64))
    if rng is None:
        rng = np.random.default_rng(0)
    pool = np.arange(len(albedos))
    if max_points is not None and len(pool) > max_points:
        pool = np.sort(rng.choice(len(pool), size=max_points, replace=False))
    pts = albedos[pool]
    k = min(k, len(pts))
    _, labels = kmeans(pts, k, rng)
    chosen = []
    for c in range(k):
        members = pool[labels == c]
        if len(members) == 0:
            continue
        take = min(keep_per_cluster, len(members))
        chosen.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(chosen))


def parsimony_kernel(albedos, batch_indices, candidates,
                     bandwidth: float = BW_PARSIMONY) -> np.ndarray:
    """Albedo-space kernel weights between a batch and the candidate set,
    with self-pairs zeroed."""
    albedos = np.asarray(albedos, dtype=np.float64)
    batch = np.asarray(batch_indices, dtype=np.int64)
    cand = np.asarray(candidates, dtype=np.int64)
    va = albedos / bandwidth
    k = np.exp(-np.sum((va[batch][:, None, :] - va[cand][None, :, :]) ** 2,
                       axis=2))
    k[batch[:, None] == cand[None, :]] = 0.0
    return k


def parsimony_loss(albedos, values, batch_indices, candidates,
                   bandwidth: float = BW_PARSIMONY, norm: str = "l1",
                   kernel=None) -> tuple[float, np.ndarray]:
    """Global color-sparsity prior against the K-means candidate set.

    The kernel compares albedo colors only; the residual runs over
    ``values`` (albedo itself, or another attribute such as roughness).
    Kernel weights are constants per batch (no gradient flows through
    them); ``kernel`` replays a precomputed weight matrix.
    Returns (loss, gradient wrt values).
    """
    albedos = np.asarray(albedos, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(len(values), -1)
    batch = np.asarray(batch_indices, dtype=np.int64)
    cand = np.asarray(candidates, dtype=np.int64)

    k = parsimony_kernel(albedos, batch, cand, bandwidth) \
        if kernel is None else kernel
    w = k / (len(batch) * max(len(cand), 1))
    diff = flat[cand][None, :, :] - flat[batch][:, None, :]
    if norm == "l1":
        loss = float(np.sum(w * np.sum(np.abs(diff), axis=2)))
        g = w[:, :, None] * np.sign(diff)
    else:
        mag = np.sqrt(np.sum(diff**2, axis=2))
        loss = float(np.sum(w * mag))
        g = w[:, :, None] * diff / np.maximum(mag, 1e-12)[:, :, None]
    g2 = g.reshape(-1, flat.shape[1])
    grad = _scatter_signed(np.tile(cand, len(batch)),
                           np.repeat(batch, len(cand)), g2, len(flat))
    return loss, grad.reshape(values.shape)


def _scatter_signed(idx_pos, idx_neg, values, n_rows):
    """grad[idx_pos] += values; grad[idx_neg] -= values via one flattened
    bincount per sign (fast even for wide value rows)."""
    c = values.shape[1]
    offs = np.arange(c, dtype=np.int64)
    flat_pos = (idx_pos[:, None] * c + offs).ravel()
    flat_neg = (idx_neg[:, None] * c + offs).ravel()
    vals = values.ravel()
    out = np.bincount(flat_pos, weights=vals, minlength=n_rows * c)
    out -= np.bincount(flat_neg, weights=vals, minlength=n_rows * c)
    return out.reshape(n_rows, c)
