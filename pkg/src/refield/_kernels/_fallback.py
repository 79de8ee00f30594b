"""Pure-NumPy implementations of the hot kernels.

Mirrors the contract of the compiled core in ``_core.pyx``: identical
arguments, identical results (up to float accumulation noise), so the two
backends are interchangeable at import time.  Vectorized over rays/draws
where possible; still noticeably slower than the compiled core on the
per-ray branchy paths.
"""

from __future__ import annotations

import numpy as np

BACKEND = "fallback"


# ---------------------------------------------------------------------------
# trilinear density sampling


def sample_trilinear(sigma, origin, voxel_size, pts):
    """Trilinearly interpolate ``sigma`` at world points.

    Clamp-to-edge inside the grid box, exactly 0 outside it.
    ``sigma`` has shape (nx, ny, nz); returns float64 of shape (n,).
    """
    pts = np.asarray(pts, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    dims = np.asarray(sigma.shape)
    rel = (pts - origin) / voxel_size
    inside = np.all((rel >= 0.0) & (rel <= dims), axis=1)

    # fractional voxel-center coordinates, clamped to the center lattice
    f = np.clip(rel - 0.5, 0.0, dims - 1.0)
    i0 = np.minimum(f.astype(np.int64), dims - 2)
    i0 = np.maximum(i0, 0)
    w = f - i0

    sig = sigma
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    c000 = sig[x0, y0, z0]
    c100 = sig[x0 + 1, y0, z0]
    c010 = sig[x0, y0 + 1, z0]
    c110 = sig[x0 + 1, y0 + 1, z0]
    c001 = sig[x0, y0, z0 + 1]
    c101 = sig[x0 + 1, y0, z0 + 1]
    c011 = sig[x0, y0 + 1, z0 + 1]
    c111 = sig[x0 + 1, y0 + 1, z0 + 1]
    c00 = c000 * (1 - wx) + c100 * wx
    c10 = c010 * (1 - wx) + c110 * wx
    c01 = c001 * (1 - wx) + c101 * wx
    c11 = c011 * (1 - wx) + c111 * wx
    c0 = c00 * (1 - wy) + c10 * wy
    c1 = c01 * (1 - wy) + c11 * wy
    out = (c0 * (1 - wz) + c1 * wz).astype(np.float64)
    out[~inside] = 0.0
    return out[0] if squeeze else out


def _vacuum_cell_mask(sigma):
    """Boolean per-voxel mask: True where every stencil voxel reachable from
    inside that voxel's box is zero, i.e. the trilinear field is exactly 0
    over the whole voxel box."""
    from scipy.ndimage import maximum_filter

    return maximum_filter(sigma, size=3, mode="nearest") == 0.0


# ---------------------------------------------------------------------------
# ray marching


def march_dense(sigma, origin, voxel_size, o, d, tn, tf, n_steps):
    """Midpoint-rule optical depth along rays.

    Returns cumulative optical depth at the ``n_steps + 1`` segment
    boundaries, shape (n_rays, n_steps + 1); transmittance follows as
    ``1 - exp(-depth)``.
    """
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    tn = np.atleast_1d(np.asarray(tn, dtype=np.float64))
    tf = np.atleast_1d(np.asarray(tf, dtype=np.float64))
    n = o.shape[0]
    h = (tf - tn) / n_steps
    k = np.arange(n_steps, dtype=np.float64) + 0.5
    t_mid = tn[:, None] + k[None, :] * h[:, None]
    pts = o[:, None, :] + t_mid[:, :, None] * d[:, None, :]
    vals = sample_trilinear(sigma, origin, voxel_size, pts.reshape(-1, 3))
    vals = vals.reshape(n, n_steps)
    depth = np.zeros((n, n_steps + 1), dtype=np.float64)
    np.cumsum(vals * h[:, None], axis=1, out=depth[:, 1:])
    return depth


def march_octree(sigma, origin, voxel_size, tree, o, d, tn, tf, steps_per_unit):
    """Optical depth at the far bound with empty-region skipping.

    Skips samples whose trilinear stencil is all-zero (the same regions a
    support-aware octree traversal skips), so values match ``march_dense``
    exactly while empty space costs no density evaluations.

    Returns (depth_end, eval_counts), both shape (n_rays,).
    """
    del tree  # structure not needed: the per-voxel vacuum mask is equivalent
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    tn = np.atleast_1d(np.asarray(tn, dtype=np.float64))
    tf = np.atleast_1d(np.asarray(tf, dtype=np.float64))
    n = o.shape[0]
    dims = np.asarray(sigma.shape)
    vac = _vacuum_cell_mask(sigma)

    depth_end = np.zeros(n, dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    n_steps = np.maximum(2, np.ceil((tf - tn) * steps_per_unit)).astype(np.int64)
    for group in np.unique(n_steps):
        sel = np.nonzero(n_steps == group)[0]
        h = (tf[sel] - tn[sel]) / group
        k = np.arange(group, dtype=np.float64) + 0.5
        t_mid = tn[sel, None] + k[None, :] * h[:, None]
        pts = (o[sel, None, :] + t_mid[:, :, None] * d[sel, None, :]).reshape(-1, 3)
        rel = (pts - origin) / voxel_size
        inside = np.all((rel >= 0.0) & (rel <= dims), axis=1)
        idx = np.clip(rel.astype(np.int64), 0, dims - 1)
        occupied = inside & ~vac[idx[:, 0], idx[:, 1], idx[:, 2]]
        vals = np.zeros(len(pts), dtype=np.float64)
        if occupied.any():
            vals[occupied] = sample_trilinear(sigma, origin, voxel_size, pts[occupied])
        vals = vals.reshape(len(sel), group)
        # sequential accumulation, matching the compiled kernel bit-for-bit
        depth_end[sel] = np.cumsum(vals, axis=1)[:, -1] * h
        counts[sel] = occupied.reshape(len(sel), group).sum(axis=1)
    return depth_end, counts


def visibility(sigma, origin, voxel_size, tree, pts, dirs, offset, steps_per_unit):
    """Transmitted light fraction exp(-depth) from each point toward each
    direction, integrating from ``pts + offset * dirs`` to the grid box exit.

    Returns (vis, eval_counts)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    dims = np.asarray(sigma.shape, dtype=np.float64)
    box_lo = np.asarray(origin, dtype=np.float64)
    box_hi = box_lo + dims * voxel_size

    start = pts + offset * dirs
    # slab intersection of the half-line [0, inf) with the grid box
    n_rays = len(start)
    t_entry = np.zeros(n_rays, dtype=np.float64)
    t_exit = np.full(n_rays, 1e300, dtype=np.float64)
    for ax in range(3):
        b = dirs[:, ax]
        p = start[:, ax]
        moving = np.abs(b) > 1e-300
        safe_b = np.where(moving, b, 1.0)
        tA = (box_lo[ax] - p) / safe_b
        tB = (box_hi[ax] - p) / safe_b
        lo_t = np.minimum(tA, tB)
        hi_t = np.maximum(tA, tB)
        t_entry = np.where(moving, np.maximum(t_entry, lo_t), t_entry)
        t_exit = np.where(moving, np.minimum(t_exit, hi_t), t_exit)
        off_slab = ~moving & ((p < box_lo[ax]) | (p > box_hi[ax]))
        t_exit = np.where(off_slab, -1e300, t_exit)

    hit = t_exit > t_entry
    vis = np.ones(len(pts), dtype=np.float64)
    counts = np.zeros(len(pts), dtype=np.int64)
    if hit.any():
        depth, cnt = march_octree(
            sigma, origin, voxel_size, tree,
            start[hit], dirs[hit], t_entry[hit], t_exit[hit], steps_per_unit,
        )
        vis[hit] = np.exp(-depth)
        counts[hit] = cnt
    return vis, counts


# ---------------------------------------------------------------------------
# Gaussian KD-tree neighbor sampling


def gkd_sample(left, right, start, end, box_lo, box_hi, order, feats,
               queries, m, uniforms, pos_in_order=None):
    """Draw ``m`` approximately kernel-proportional neighbors per query.

    Top-down stochastic descent: at each internal node the branch is chosen
    with probability proportional to ``count * exp(-dist2(query, box))``,
    where the count excludes the query itself; within a leaf, points are
    drawn proportional to the exact kernel ``exp(-|v_i - v_j|^2)`` with the
    query excluded.

    ``uniforms`` has shape (n_queries, m, depth_budget); both backends
    consume it identically, so draws match across backends.

    Returns (idx, kval, pdf): the drawn point indices, their exact kernel
    values against the query, and the exact proposal probability of each
    draw.
    """
    queries = np.asarray(queries, dtype=np.int64)
    nq = len(queries)
    qfeat = feats[queries]  # (nq, D)
    if pos_in_order is None:
        pos_in_order = np.argsort(order)
    qpos = pos_in_order[queries]

    node = np.zeros(nq * m, dtype=np.int64)
    logp = np.zeros(nq * m, dtype=np.float64)
    max_level = uniforms.shape[2] - 1
    for level in range(max_level):
        isint = left[node] >= 0
        if not isint.any():
            break
        ci = node[isint]
        l, r = left[ci], right[ci]
        q_rep = np.repeat(np.arange(nq), m)[isint]
        vq = qfeat[q_rep]
        qp = qpos[q_rep]
        dl = _box_dist2(vq, box_lo[l], box_hi[l])
        dr = _box_dist2(vq, box_lo[r], box_hi[r])
        cnt_l = (end[l] - start[l]) - ((start[l] <= qp) & (qp < end[l]))
        cnt_r = (end[r] - start[r]) - ((start[r] <= qp) & (qp < end[r]))
        logwl = np.log(np.maximum(cnt_l, 1e-300)) - dl
        logwr = np.log(np.maximum(cnt_r, 1e-300)) - dr
        # p(left) computed stably from the log-weight difference
        pl = 1.0 / (1.0 + np.exp(np.clip(logwr - logwl, -700, 700)))
        u = uniforms[:, :, level].ravel()[isint]
        go_left = u < pl
        node[isint] = np.where(go_left, l, r)
        p_taken = np.where(go_left, pl, 1.0 - pl)
        logp[isint] += np.log(np.maximum(p_taken, 1e-300))
    node = node.reshape(nq, m)
    logp = logp.reshape(nq, m)

    idx = np.empty((nq, m), dtype=np.int64)
    kval = np.empty((nq, m), dtype=np.float64)
    pdf = np.empty((nq, m), dtype=np.float64)
    u_leaf = uniforms[:, :, max_level]
    for qi in range(nq):
        for mi in range(m):
            nd = node[qi, mi]
            pts = order[start[nd]:end[nd]]
            k = np.exp(-np.sum((feats[pts] - qfeat[qi]) ** 2, axis=1))
            k = np.where(pts == queries[qi], 0.0, k)
            w = k
            cdf = np.cumsum(w)
            tot = cdf[-1]
            if tot <= 0.0:
                w = (pts != queries[qi]).astype(np.float64)
                cdf = np.cumsum(w)
                tot = cdf[-1]
            cdf = cdf / tot
            j = int(np.searchsorted(cdf, u_leaf[qi, mi], side="right"))
            j = min(j, len(pts) - 1)
            idx[qi, mi] = pts[j]
            kval[qi, mi] = np.exp(-np.sum((feats[pts[j]] - qfeat[qi]) ** 2))
            pdf[qi, mi] = np.exp(logp[qi, mi]) * (w[j] / tot)
    return idx, kval, pdf


def _box_dist2(v, lo, hi):
    d = np.maximum(lo - v, 0.0) + np.maximum(v - hi, 0.0)
    return np.sum(d * d, axis=1)
