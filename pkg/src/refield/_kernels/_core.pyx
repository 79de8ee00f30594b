# Compiled kernels: trilinear sampling, ray marching with octree
# empty-space skipping, hemisphere visibility, and Gaussian KD-tree
# neighbor sampling.  Semantics mirror _fallback.py exactly.

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, floor, log, sqrt

cnp.import_array()


cdef inline double _pow5(double x) noexcept nogil:
    cdef double x2 = x * x
    return x2 * x2 * x


cdef inline double _pow4(double x) noexcept nogil:
    cdef double x2 = x * x
    return x2 * x2

BACKEND = "compiled"


cdef inline double _tri(const float[:, :, ::1] sig,
                        Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                        double ox, double oy, double oz, double vs,
                        double px, double py, double pz) noexcept nogil:
    """Clamp-to-edge trilinear sample; exactly 0 outside the grid box."""
    cdef double rx = (px - ox) / vs
    cdef double ry = (py - oy) / vs
    cdef double rz = (pz - oz) / vs
    if rx < 0.0 or ry < 0.0 or rz < 0.0 or rx > nx or ry > ny or rz > nz:
        return 0.0
    cdef double fx = rx - 0.5
    cdef double fy = ry - 0.5
    cdef double fz = rz - 0.5
    if fx < 0.0:
        fx = 0.0
    if fy < 0.0:
        fy = 0.0
    if fz < 0.0:
        fz = 0.0
    if fx > nx - 1.0:
        fx = nx - 1.0
    if fy > ny - 1.0:
        fy = ny - 1.0
    if fz > nz - 1.0:
        fz = nz - 1.0
    cdef Py_ssize_t x0 = <Py_ssize_t>fx
    cdef Py_ssize_t y0 = <Py_ssize_t>fy
    cdef Py_ssize_t z0 = <Py_ssize_t>fz
    if x0 > nx - 2:
        x0 = nx - 2
    if y0 > ny - 2:
        y0 = ny - 2
    if z0 > nz - 2:
        z0 = nz - 2
    cdef double wx = fx - x0
    cdef double wy = fy - y0
    cdef double wz = fz - z0
    cdef double c00 = sig[x0, y0, z0] * (1.0 - wx) + sig[x0 + 1, y0, z0] * wx
    cdef double c10 = sig[x0, y0 + 1, z0] * (1.0 - wx) + sig[x0 + 1, y0 + 1, z0] * wx
    cdef double c01 = sig[x0, y0, z0 + 1] * (1.0 - wx) + sig[x0 + 1, y0, z0 + 1] * wx
    cdef double c11 = sig[x0, y0 + 1, z0 + 1] * (1.0 - wx) + sig[x0 + 1, y0 + 1, z0 + 1] * wx
    cdef double c0 = c00 * (1.0 - wy) + c10 * wy
    cdef double c1 = c01 * (1.0 - wy) + c11 * wy
    return c0 * (1.0 - wz) + c1 * wz


def sample_trilinear(sigma, origin, voxel_size, pts):
    cdef cnp.ndarray[cnp.float32_t, ndim=3] sig = np.ascontiguousarray(sigma, dtype=np.float32)
    p = np.asarray(pts, dtype=np.float64)
    squeeze = p.ndim == 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pp = np.atleast_2d(p)
    cdef Py_ssize_t n = pp.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double vs = voxel_size
    cdef Py_ssize_t nx = sig.shape[0], ny = sig.shape[1], nz = sig.shape[2]
    cdef const float[:, :, ::1] sv = sig
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = _tri(sv, nx, ny, nz, ox, oy, oz, vs,
                      pp[i, 0], pp[i, 1], pp[i, 2])
    return out[0] if squeeze else out


def march_dense(sigma, origin, voxel_size, o, d, tn, tf, int n_steps):
    cdef cnp.ndarray[cnp.float32_t, ndim=3] sig = np.ascontiguousarray(sigma, dtype=np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] oo = np.atleast_2d(np.asarray(o, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dd = np.atleast_2d(np.asarray(d, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tnn = np.atleast_1d(np.asarray(tn, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tff = np.atleast_1d(np.asarray(tf, dtype=np.float64))
    cdef Py_ssize_t n = oo.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] depth = np.zeros((n, n_steps + 1), dtype=np.float64)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double vs = voxel_size
    cdef Py_ssize_t nx = sig.shape[0], ny = sig.shape[1], nz = sig.shape[2]
    cdef const float[:, :, ::1] sv = sig
    cdef Py_ssize_t i, k
    cdef double h, t, acc, v
    for i in range(n):
        h = (tff[i] - tnn[i]) / n_steps
        acc = 0.0
        for k in range(n_steps):
            t = tnn[i] + (k + 0.5) * h
            v = _tri(sv, nx, ny, nz, ox, oy, oz, vs,
                     oo[i, 0] + t * dd[i, 0],
                     oo[i, 1] + t * dd[i, 1],
                     oo[i, 2] + t * dd[i, 2])
            acc = acc + v * h
            depth[i, k + 1] = acc
    return depth


cdef struct Span:
    double t_exit
    int skip


cdef int _collect_spans(const int[:, ::1] children, const int[:, ::1] lo,
                        const int[:, ::1] hi, const unsigned char[::1] skip,
                        double ox, double oy, double oz, double vs,
                        double px, double py, double pz,
                        double dx, double dy, double dz,
                        double t0, double t1,
                        Span* spans, int max_spans) noexcept nogil:
    """DFS in ascending ray order over octree leaves overlapping [t0, t1].

    Writes (t_exit, skip) spans; returns the span count, or -1 on overflow
    (caller falls back to treating everything as non-skippable).
    """
    cdef int stack[512]
    cdef int top = 0
    cdef int n_spans = 0
    cdef int node, c, j, m, child
    cdef double e0, e1, b, lo_w, hi_w, tA, tB, tmp
    cdef int order_idx[8]
    cdef double order_t[8]
    cdef int n_child

    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        # clipped ray-box overlap for this node
        e0 = t0
        e1 = t1
        for j in range(3):
            lo_w = (ox if j == 0 else (oy if j == 1 else oz)) + lo[node, j] * vs
            hi_w = (ox if j == 0 else (oy if j == 1 else oz)) + hi[node, j] * vs
            b = (dx if j == 0 else (dy if j == 1 else dz))
            if b > 1e-300 or b < -1e-300:
                tA = (lo_w - (px if j == 0 else (py if j == 1 else pz))) / b
                tB = (hi_w - (px if j == 0 else (py if j == 1 else pz))) / b
                if tA > tB:
                    tmp = tA
                    tA = tB
                    tB = tmp
                if tA > e0:
                    e0 = tA
                if tB < e1:
                    e1 = tB
            else:
                b = (px if j == 0 else (py if j == 1 else pz))
                if b < lo_w or b > hi_w:
                    e0 = 1.0
                    e1 = 0.0
        if e1 <= e0:
            continue
        if skip[node]:
            if n_spans >= max_spans:
                return -1
            spans[n_spans].t_exit = e1
            spans[n_spans].skip = 1
            n_spans += 1
            continue
        n_child = 0
        for c in range(8):
            child = children[node, c]
            if child >= 0:
                n_child += 1
        if n_child == 0:
            if n_spans >= max_spans:
                return -1
            spans[n_spans].t_exit = e1
            spans[n_spans].skip = 0
            n_spans += 1
            continue
        # order existing children by entry parameter, push in reverse
        m = 0
        for c in range(8):
            child = children[node, c]
            if child < 0:
                continue
            tA = _entry_t(lo, hi, child, ox, oy, oz, vs, px, py, pz, dx, dy, dz, e0, e1)
            order_idx[m] = child
            order_t[m] = tA
            m += 1
        for c in range(1, m):
            tA = order_t[c]
            child = order_idx[c]
            j = c - 1
            while j >= 0 and order_t[j] > tA:
                order_t[j + 1] = order_t[j]
                order_idx[j + 1] = order_idx[j]
                j -= 1
            order_t[j + 1] = tA
            order_idx[j + 1] = child
        for c in range(m - 1, -1, -1):
            if top >= 512:
                return -1
            stack[top] = order_idx[c]
            top += 1
    return n_spans


cdef double _entry_t(const int[:, ::1] lo, const int[:, ::1] hi, int node,
                     double ox, double oy, double oz, double vs,
                     double px, double py, double pz,
                     double dx, double dy, double dz,
                     double t0, double t1) noexcept nogil:
    cdef double e0 = t0
    cdef double e1 = t1
    cdef int j
    cdef double lo_w, hi_w, b, tA, tB, tmp, p
    for j in range(3):
        lo_w = (ox if j == 0 else (oy if j == 1 else oz)) + lo[node, j] * vs
        hi_w = (ox if j == 0 else (oy if j == 1 else oz)) + hi[node, j] * vs
        b = (dx if j == 0 else (dy if j == 1 else dz))
        p = (px if j == 0 else (py if j == 1 else pz))
        if b > 1e-300 or b < -1e-300:
            tA = (lo_w - p) / b
            tB = (hi_w - p) / b
            if tA > tB:
                tmp = tA
                tA = tB
                tB = tmp
            if tA > e0:
                e0 = tA
            if tB < e1:
                e1 = tB
        else:
            if p < lo_w or p > hi_w:
                return 1e300
    if e1 <= e0:
        return 1e300
    return e0


cdef void _march_spans(const float[:, :, ::1] sv,
                       Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                       double ox, double oy, double oz, double vs,
                       double px, double py, double pz,
                       double dx, double dy, double dz,
                       double tn, double tf, long n_steps,
                       Span* spans, int n_spans,
                       double* depth_out, long* count_out) noexcept nogil:
    cdef double h = (tf - tn) / n_steps
    cdef long cursor = 0
    cdef long k_last, k
    cdef int s
    cdef double acc = 0.0
    cdef long evals = 0
    cdef double t, v
    for s in range(n_spans):
        k_last = <long>floor((spans[s].t_exit - tn) / h - 0.5 + 1e-12)
        if k_last > n_steps - 1:
            k_last = n_steps - 1
        if spans[s].skip:
            if k_last + 1 > cursor:
                cursor = k_last + 1
            continue
        k = cursor
        while k <= k_last:
            t = tn + (k + 0.5) * h
            v = _tri(sv, nx, ny, nz, ox, oy, oz, vs,
                     px + t * dx, py + t * dy, pz + t * dz)
            acc = acc + v
            evals += 1
            k += 1
        if k_last + 1 > cursor:
            cursor = k_last + 1
    depth_out[0] = acc * h
    count_out[0] = evals


def march_octree(sigma, origin, voxel_size, tree, o, d, tn, tf, double steps_per_unit):
    children_a, lo_a, hi_a, skip_a = tree
    cdef cnp.ndarray[cnp.float32_t, ndim=3] sig = np.ascontiguousarray(sigma, dtype=np.float32)
    cdef const int[:, ::1] children = np.ascontiguousarray(children_a, dtype=np.int32)
    cdef const int[:, ::1] lo = np.ascontiguousarray(lo_a, dtype=np.int32)
    cdef const int[:, ::1] hi = np.ascontiguousarray(hi_a, dtype=np.int32)
    cdef const unsigned char[::1] skip = np.ascontiguousarray(skip_a, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] oo = np.atleast_2d(np.asarray(o, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dd = np.atleast_2d(np.asarray(d, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tnn = np.atleast_1d(np.asarray(tn, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tff = np.atleast_1d(np.asarray(tf, dtype=np.float64))
    cdef Py_ssize_t n = oo.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] depth = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(n, dtype=np.int64)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double vs = voxel_size
    cdef Py_ssize_t nx = sig.shape[0], ny = sig.shape[1], nz = sig.shape[2]
    cdef const float[:, :, ::1] sv = sig
    cdef Span spans[4096]
    cdef Span whole
    cdef int n_spans
    cdef Py_ssize_t i
    cdef long n_steps
    cdef double dpt
    cdef long cnt
    for i in range(n):
        n_steps = <long>ceil((tff[i] - tnn[i]) * steps_per_unit)
        if n_steps < 2:
            n_steps = 2
        n_spans = _collect_spans(children, lo, hi, skip, ox, oy, oz, vs,
                                 oo[i, 0], oo[i, 1], oo[i, 2],
                                 dd[i, 0], dd[i, 1], dd[i, 2],
                                 tnn[i], tff[i], spans, 4096)
        if n_spans < 0:
            whole.t_exit = tff[i]
            whole.skip = 0
            _march_spans(sv, nx, ny, nz, ox, oy, oz, vs,
                         oo[i, 0], oo[i, 1], oo[i, 2],
                         dd[i, 0], dd[i, 1], dd[i, 2],
                         tnn[i], tff[i], n_steps, &whole, 1, &dpt, &cnt)
        else:
            _march_spans(sv, nx, ny, nz, ox, oy, oz, vs,
                         oo[i, 0], oo[i, 1], oo[i, 2],
                         dd[i, 0], dd[i, 1], dd[i, 2],
                         tnn[i], tff[i], n_steps, spans, n_spans, &dpt, &cnt)
        depth[i] = dpt
        counts[i] = cnt
    return depth, counts


def visibility(sigma, origin, voxel_size, tree, pts, dirs, double offset,
               double steps_per_unit):
    children_a, lo_a, hi_a, skip_a = tree
    cdef cnp.ndarray[cnp.float32_t, ndim=3] sig = np.ascontiguousarray(sigma, dtype=np.float32)
    cdef const int[:, ::1] children = np.ascontiguousarray(children_a, dtype=np.int32)
    cdef const int[:, ::1] lo = np.ascontiguousarray(lo_a, dtype=np.int32)
    cdef const int[:, ::1] hi = np.ascontiguousarray(hi_a, dtype=np.int32)
    cdef const unsigned char[::1] skip = np.ascontiguousarray(skip_a, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pp = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dd = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    cdef Py_ssize_t n = pp.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] vis = np.ones(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(n, dtype=np.int64)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double vs = voxel_size
    cdef Py_ssize_t nx = sig.shape[0], ny = sig.shape[1], nz = sig.shape[2]
    cdef const float[:, :, ::1] sv = sig
    cdef double box_hi_x = ox + nx * vs
    cdef double box_hi_y = oy + ny * vs
    cdef double box_hi_z = oz + nz * vs
    cdef Span spans[4096]
    cdef Span whole
    cdef int n_spans
    cdef Py_ssize_t i
    cdef long n_steps, cnt
    cdef double sx, sy, sz, dx, dy, dz, t_entry, t_exit, tA, tB, tmp, b, p
    cdef double lo_w[3]
    cdef double hi_w[3]
    cdef int j
    cdef double dpt
    lo_w[0] = ox
    lo_w[1] = oy
    lo_w[2] = oz
    hi_w[0] = box_hi_x
    hi_w[1] = box_hi_y
    hi_w[2] = box_hi_z
    for i in range(n):
        dx = dd[i, 0]
        dy = dd[i, 1]
        dz = dd[i, 2]
        sx = pp[i, 0] + offset * dx
        sy = pp[i, 1] + offset * dy
        sz = pp[i, 2] + offset * dz
        t_entry = 0.0
        t_exit = 1e300
        for j in range(3):
            b = dx if j == 0 else (dy if j == 1 else dz)
            p = sx if j == 0 else (sy if j == 1 else sz)
            if b > 1e-300 or b < -1e-300:
                tA = (lo_w[j] - p) / b
                tB = (hi_w[j] - p) / b
                if tA > tB:
                    tmp = tA
                    tA = tB
                    tB = tmp
                if tA > t_entry:
                    t_entry = tA
                if tB < t_exit:
                    t_exit = tB
            else:
                if p < lo_w[j] or p > hi_w[j]:
                    t_exit = -1e300
        if t_exit <= t_entry:
            continue
        n_steps = <long>ceil((t_exit - t_entry) * steps_per_unit)
        if n_steps < 2:
            n_steps = 2
        n_spans = _collect_spans(children, lo, hi, skip, ox, oy, oz, vs,
                                 sx, sy, sz, dx, dy, dz,
                                 t_entry, t_exit, spans, 4096)
        if n_spans < 0:
            whole.t_exit = t_exit
            whole.skip = 0
            _march_spans(sv, nx, ny, nz, ox, oy, oz, vs, sx, sy, sz,
                         dx, dy, dz, t_entry, t_exit, n_steps,
                         &whole, 1, &dpt, &cnt)
        else:
            _march_spans(sv, nx, ny, nz, ox, oy, oz, vs, sx, sy, sz,
                         dx, dy, dz, t_entry, t_exit, n_steps,
                         spans, n_spans, &dpt, &cnt)
        vis[i] = exp(-dpt)
        counts[i] = cnt
    return vis, counts


def shade_terms(albedo_a, alpha_a, f0_a, n_a, wi_a, wo_a, int diffuse_cosine,
                int with_grads):
    """Fused per-sample BRDF quantities (see the Python fallback for the
    reference formulation)."""
    cdef const double[:, ::1] albedo = np.ascontiguousarray(albedo_a, dtype=np.float64)
    cdef const double[::1] alpha = np.ascontiguousarray(alpha_a, dtype=np.float64)
    cdef const double[::1] f0v = np.ascontiguousarray(np.broadcast_to(f0_a, (3,)), dtype=np.float64)
    cdef const double[:, ::1] nv = np.ascontiguousarray(n_a, dtype=np.float64)
    cdef const double[:, ::1] wiv = np.ascontiguousarray(wi_a, dtype=np.float64)
    cdef const double[:, ::1] wov = np.ascontiguousarray(wo_a, dtype=np.float64)
    cdef Py_ssize_t m_n = nv.shape[0]
    cdef double pi = 3.14159265358979323846

    f_diff_a = np.empty((m_n, 3))
    f_spec_a = np.empty((m_n, 3))
    p_spec_a = np.empty(m_n)
    p_diff_a = np.empty(m_n)
    cos_i_a = np.empty(m_n)
    valid_a = np.empty(m_n, dtype=np.uint8)
    cdef double[:, ::1] f_diff = f_diff_a
    cdef double[:, ::1] f_spec = f_spec_a
    cdef double[::1] p_spec = p_spec_a
    cdef double[::1] p_diff = p_diff_a
    cdef double[::1] cos_i = cos_i_a
    cdef unsigned char[::1] validv = valid_a

    cdef double[:, ::1] d_albedo = None
    cdef double[:, ::1] d_alpha = None
    cdef double[:, ::1] j_srgb = None
    cdef double[:, ::1] j_svec = None
    cdef double[:, ::1] j_di = None
    cdef double[:, ::1] j_do = None
    if with_grads:
        d_albedo_a = np.empty((m_n, 3))
        d_alpha_a = np.empty((m_n, 3))
        j_srgb_a = np.empty((m_n, 3))
        j_svec_a = np.empty((m_n, 3))
        j_di_a = np.empty((m_n, 3))
        j_do_a = np.empty((m_n, 3))
        d_albedo = d_albedo_a
        d_alpha = d_alpha_a
        j_srgb = j_srgb_a
        j_svec = j_svec_a
        j_di = j_di_a
        j_do = j_do_a

    cdef Py_ssize_t i, c
    cdef double nx, ny, nz, wix, wiy, wiz, wox, woy, woz
    cdef double hx, hy, hz, hn, mu_i, mu_o, mu_h, cc
    cdef double al, a2, q, d, li, lo, s, g, denom_raw, denom
    cdef double mu_i_s, mu_o_s, ci, co, omci, omco
    cdef double f0c, f90c, span, fres, fi, fo, coupling
    cdef double how, mu_h_c, inv_pi = 1.0 / pi
    cdef double dd_da, dli_da, dlo_da, ds_da, dg_da, base_da
    cdef double dd_dmuh, dli_dmui, dlo_dmuo, ds_dmui, ds_dmuo
    cdef double dg_dmui, dg_dmuo, dinv_i, dinv_o, k_mui, k_muo, k_muh
    cdef double dfi, dfo, spec_scalar
    cdef int valid, clamped

    for i in range(m_n):
        nx = nv[i, 0]; ny = nv[i, 1]; nz = nv[i, 2]
        wix = wiv[i, 0]; wiy = wiv[i, 1]; wiz = wiv[i, 2]
        wox = wov[i, 0]; woy = wov[i, 1]; woz = wov[i, 2]
        hx = wix + wox; hy = wiy + woy; hz = wiz + woz
        hn = sqrt(hx * hx + hy * hy + hz * hz)
        if hn > 1e-12:
            hx /= hn; hy /= hn; hz /= hn
        else:
            hx = nx; hy = ny; hz = nz
        mu_i = nx * wix + ny * wiy + nz * wiz
        mu_o = nx * wox + ny * woy + nz * woz
        mu_h = nx * hx + ny * hy + nz * hz
        cc = hx * wox + hy * woy + hz * woz
        if cc < 0.0:
            cc = 0.0
        elif cc > 1.0:
            cc = 1.0
        valid = 1 if (mu_i > 0.0 and mu_o > 0.0) else 0
        validv[i] = valid
        cos_i[i] = mu_i if mu_i > 0.0 else 0.0
        mu_i_s = mu_i if mu_i > 1e-9 else 1e-9
        mu_o_s = mu_o if mu_o > 1e-9 else 1e-9

        al = alpha[i]
        a2 = al * al
        q = 1.0 + (a2 - 1.0) * mu_h * mu_h
        d = a2 / (pi * q * q)
        li = sqrt(a2 + (1.0 - a2) * mu_i_s * mu_i_s)
        lo = sqrt(a2 + (1.0 - a2) * mu_o_s * mu_o_s)
        s = mu_o_s * li + mu_i_s * lo
        g = 2.0 * mu_i_s * mu_o_s / s
        denom_raw = 4.0 * mu_i_s * mu_o_s
        clamped = 1 if denom_raw < 1e-4 else 0
        denom = denom_raw if denom_raw > 1e-4 else 1e-4
        spec_scalar = d * g / denom

        ci = mu_i if mu_i > 0.0 else 0.0
        if ci > 1.0:
            ci = 1.0
        co = mu_o if mu_o > 0.0 else 0.0
        if co > 1.0:
            co = 1.0
        omci = 1.0 - ci
        omco = 1.0 - co

        # lobe pdfs
        how = hx * wox + hy * woy + hz * woz
        mu_h_c = mu_h
        if mu_h_c < 0.0:
            mu_h_c = 0.0
        elif mu_h_c > 1.0:
            mu_h_c = 1.0
        if how > 0.0 and mu_h > 0.0:
            q = 1.0 + (a2 - 1.0) * mu_h_c * mu_h_c
            p_spec[i] = (a2 / (pi * q * q)) * mu_h_c / (
                4.0 * how if 4.0 * how > 1e-12 else 1e-12)
        else:
            p_spec[i] = 0.0
        if diffuse_cosine:
            p_diff[i] = (mu_i if mu_i > 0.0 else 0.0) * inv_pi
        else:
            p_diff[i] = (1.0 / (2.0 * pi)) if mu_i > 0.0 else 0.0

        q = 1.0 + (a2 - 1.0) * mu_h * mu_h  # restore (reused above)
        for c in range(3):
            f0c = f0v[c]
            f90c = 50.0 * f0c
            if f90c > 1.0:
                f90c = 1.0
            elif f90c < 0.0:
                f90c = 0.0
            span = f90c - f0c
            fres = f0c + span * _pow5(1.0 - cc)
            fi = f0c + span * _pow5(omci)
            fo = f0c + span * _pow5(omco)
            coupling = (1.0 - fi) * (1.0 - fo)
            if valid:
                f_diff[i, c] = albedo[i, c] * inv_pi * coupling
                f_spec[i, c] = spec_scalar * fres
            else:
                f_diff[i, c] = 0.0
                f_spec[i, c] = 0.0
            if with_grads:
                if valid:
                    d_albedo[i, c] = inv_pi * coupling
                    dd_da = 2.0 * al * (q - 2.0 * a2 * mu_h * mu_h) / (pi * q * q * q)
                    dli_da = al * (1.0 - mu_i_s * mu_i_s) / li
                    dlo_da = al * (1.0 - mu_o_s * mu_o_s) / lo
                    ds_da = mu_o_s * dli_da + mu_i_s * dlo_da
                    dg_da = -g * ds_da / s
                    d_alpha[i, c] = ((dd_da * g + d * dg_da) / denom) * fres
                    j_srgb[i, c] = fres
                    dfi = 5.0 * span * _pow4(omci)
                    dfo = 5.0 * span * _pow4(omco)
                    j_di[i, c] = albedo[i, c] * inv_pi * dfi * (1.0 - fo)
                    j_do[i, c] = albedo[i, c] * inv_pi * (1.0 - fi) * dfo
                else:
                    d_albedo[i, c] = 0.0
                    d_alpha[i, c] = 0.0
                    j_srgb[i, c] = 0.0
                    j_di[i, c] = 0.0
                    j_do[i, c] = 0.0
        if with_grads:
            dd_dmuh = -4.0 * a2 * (a2 - 1.0) * mu_h / (pi * q * q * q)
            dli_dmui = (1.0 - a2) * mu_i_s / li
            dlo_dmuo = (1.0 - a2) * mu_o_s / lo
            ds_dmui = mu_o_s * dli_dmui + lo
            ds_dmuo = mu_i_s * dlo_dmuo + li
            dg_dmui = 2.0 * mu_o_s / s - g * ds_dmui / s
            dg_dmuo = 2.0 * mu_i_s / s - g * ds_dmuo / s
            if clamped:
                dinv_i = 0.0
                dinv_o = 0.0
            else:
                dinv_i = -4.0 * mu_o_s / (denom * denom)
                dinv_o = -4.0 * mu_i_s / (denom * denom)
            k_mui = d * (dg_dmui / denom + g * dinv_i)
            k_muo = d * (dg_dmuo / denom + g * dinv_o)
            k_muh = dd_dmuh * g / denom
            j_svec[i, 0] = k_mui * wix + k_muo * wox + k_muh * hx
            j_svec[i, 1] = k_mui * wiy + k_muo * woy + k_muh * hy
            j_svec[i, 2] = k_mui * wiz + k_muo * woz + k_muh * hz

    out = {"f_diff": f_diff_a, "f_spec": f_spec_a, "p_spec": p_spec_a,
           "p_diff": p_diff_a, "cos_i": cos_i_a,
           "valid": valid_a.view(np.bool_)}
    if with_grads:
        out["d_albedo"] = d_albedo_a
        out["d_alpha"] = d_alpha_a
        out["jac_spec_rgb"] = j_srgb_a
        out["jac_spec_vec"] = j_svec_a
        out["jac_diff_rgb_i"] = j_di_a
        out["jac_diff_rgb_o"] = j_do_a
        out["wi"] = np.asarray(wi_a)
        out["wo"] = np.asarray(wo_a)
    return out


def env_gather(mips_flat_a, level_offsets_a, level_res_a, face_a, u_a, v_a,
               level_a):
    """Trilinear cube-map lookup over a flattened mip chain.

    Returns (rgb (m, 3), levels (m, 2), iu (m, 2, 4), iv (m, 2, 4),
    weights (m, 2, 4)) matching the Python sampler's footprint layout.
    """
    cdef const double[::1] mips = np.ascontiguousarray(mips_flat_a, dtype=np.float64)
    cdef const long[::1] offs = np.ascontiguousarray(level_offsets_a, dtype=np.int64)
    cdef const long[::1] res = np.ascontiguousarray(level_res_a, dtype=np.int64)
    cdef const long[::1] face = np.ascontiguousarray(face_a, dtype=np.int64)
    cdef const double[::1] u = np.ascontiguousarray(u_a, dtype=np.float64)
    cdef const double[::1] v = np.ascontiguousarray(v_a, dtype=np.float64)
    cdef const double[::1] level = np.ascontiguousarray(level_a, dtype=np.float64)
    cdef Py_ssize_t m_n = face.shape[0]
    cdef int n_levels = res.shape[0]

    out_a = np.zeros((m_n, 3))
    lvl_a = np.zeros((m_n, 2), dtype=np.int64)
    iu_a = np.zeros((m_n, 2, 4), dtype=np.int64)
    iv_a = np.zeros((m_n, 2, 4), dtype=np.int64)
    w_a = np.zeros((m_n, 2, 4))
    cdef double[:, ::1] out = out_a
    cdef long[:, ::1] lvl = lvl_a
    cdef long[:, :, ::1] iu = iu_a
    cdef long[:, :, ::1] iv = iv_a
    cdef double[:, :, ::1] wv = w_a

    cdef Py_ssize_t i, slot, c, k
    cdef int l0, l1, lev
    cdef long wres, base, iu0, iv0, iu1, iv1, idx
    cdef double lv, blend, scale, pu, pv, fu, fv
    cdef double ww[4]
    cdef long ius[4]
    cdef long ivs[4]
    for i in range(m_n):
        lv = level[i]
        if lv < 0.0:
            lv = 0.0
        if lv > n_levels - 1.0:
            lv = n_levels - 1.0
        l0 = <int>lv
        l1 = l0 + 1 if l0 + 1 < n_levels else n_levels - 1
        blend = lv - l0
        for slot in range(2):
            lev = l0 if slot == 0 else l1
            scale = (1.0 - blend) if slot == 0 else blend
            lvl[i, slot] = lev
            wres = res[lev]
            base = offs[lev]
            pu = (u[i] + 1.0) * 0.5 * wres - 0.5
            pv = (v[i] + 1.0) * 0.5 * wres - 0.5
            if pu < 0.0:
                pu = 0.0
            if pv < 0.0:
                pv = 0.0
            if pu > wres - 1.0:
                pu = wres - 1.0
            if pv > wres - 1.0:
                pv = wres - 1.0
            iu0 = <long>pu
            iv0 = <long>pv
            if iu0 > wres - 2 and wres >= 2:
                iu0 = wres - 2
            if iv0 > wres - 2 and wres >= 2:
                iv0 = wres - 2
            if iu0 < 0:
                iu0 = 0
            if iv0 < 0:
                iv0 = 0
            fu = pu - iu0
            fv = pv - iv0
            iu1 = iu0 + 1 if iu0 + 1 < wres else wres - 1
            iv1 = iv0 + 1 if iv0 + 1 < wres else wres - 1
            ius[0] = iu0; ius[1] = iu1; ius[2] = iu0; ius[3] = iu1
            ivs[0] = iv0; ivs[1] = iv0; ivs[2] = iv1; ivs[3] = iv1
            ww[0] = (1 - fu) * (1 - fv) * scale
            ww[1] = fu * (1 - fv) * scale
            ww[2] = (1 - fu) * fv * scale
            ww[3] = fu * fv * scale
            for k in range(4):
                iu[i, slot, k] = ius[k]
                iv[i, slot, k] = ivs[k]
                wv[i, slot, k] = ww[k]
                idx = base + ((face[i] * wres + ivs[k]) * wres + ius[k]) * 3
                for c in range(3):
                    out[i, c] += ww[k] * mips[idx + c]
    return out_a, lvl_a, iu_a, iv_a, w_a


def env_scatter(acc_flat_a, level_offsets_a, level_res_a, face_a, lvl_a,
                iu_a, iv_a, w_a, dl_a):
    """Accumulate footprint-weighted gradients into the flattened mips."""
    cdef double[::1] acc = acc_flat_a
    cdef const long[::1] offs = np.ascontiguousarray(level_offsets_a, dtype=np.int64)
    cdef const long[::1] res = np.ascontiguousarray(level_res_a, dtype=np.int64)
    cdef const long[::1] face = np.ascontiguousarray(face_a, dtype=np.int64)
    cdef const long[:, ::1] lvl = np.ascontiguousarray(lvl_a, dtype=np.int64)
    cdef const long[:, :, ::1] iu = np.ascontiguousarray(iu_a, dtype=np.int64)
    cdef const long[:, :, ::1] iv = np.ascontiguousarray(iv_a, dtype=np.int64)
    cdef const double[:, :, ::1] wv = np.ascontiguousarray(w_a, dtype=np.float64)
    cdef const double[:, ::1] dl = np.ascontiguousarray(dl_a, dtype=np.float64)
    cdef Py_ssize_t i, slot, k, c
    cdef long lev, wres, base, idx
    cdef double w
    for i in range(face.shape[0]):
        for slot in range(2):
            lev = lvl[i, slot]
            wres = res[lev]
            base = offs[lev]
            for k in range(4):
                w = wv[i, slot, k]
                if w == 0.0:
                    continue
                idx = base + ((face[i] * wres + iv[i, slot, k]) * wres
                              + iu[i, slot, k]) * 3
                for c in range(3):
                    acc[idx + c] += w * dl[i, c]


def gkd_sample(left_a, right_a, start_a, end_a, box_lo_a, box_hi_a, order_a,
               feats_a, queries_a, int m, uniforms_a, pos_in_order=None):
    cdef const long[::1] left = np.ascontiguousarray(left_a, dtype=np.int64)
    cdef const long[::1] right = np.ascontiguousarray(right_a, dtype=np.int64)
    cdef const long[::1] start = np.ascontiguousarray(start_a, dtype=np.int64)
    cdef const long[::1] end = np.ascontiguousarray(end_a, dtype=np.int64)
    cdef const double[:, ::1] box_lo = np.ascontiguousarray(box_lo_a, dtype=np.float64)
    cdef const double[:, ::1] box_hi = np.ascontiguousarray(box_hi_a, dtype=np.float64)
    cdef const long[::1] order = np.ascontiguousarray(order_a, dtype=np.int64)
    cdef const double[:, ::1] feats = np.ascontiguousarray(feats_a, dtype=np.float64)
    cdef const long[::1] queries = np.ascontiguousarray(queries_a, dtype=np.int64)
    cdef const double[:, :, ::1] uniforms = np.ascontiguousarray(uniforms_a, dtype=np.float64)
    if pos_in_order is None:
        pos_in_order = np.argsort(order_a)
    cdef const long[::1] pos_ord = np.ascontiguousarray(pos_in_order, dtype=np.int64)
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t D = feats.shape[1]
    cdef int max_level = uniforms.shape[2] - 1
    cdef cnp.ndarray[cnp.int64_t, ndim=2] idx = np.empty((nq, m), dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] kval = np.empty((nq, m), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pdf = np.empty((nq, m), dtype=np.float64)
    cdef Py_ssize_t qi, mi, j, pidx
    cdef long node, l, r, self_idx, best, qp, cl, cr
    cdef int level
    cdef double dl, dr, logwl, logwr, z, pl, u, lp
    cdef double tot, acc, k, diff
    cdef double wbuf[256]
    cdef long pbuf[256]
    cdef Py_ssize_t cnt, jj

    for qi in range(nq):
        self_idx = queries[qi]
        qp = pos_ord[self_idx]
        for mi in range(m):
            node = 0
            lp = 0.0
            level = 0
            while left[node] >= 0 and level < max_level:
                l = left[node]
                r = right[node]
                dl = 0.0
                dr = 0.0
                for j in range(D):
                    z = feats[self_idx, j]
                    diff = box_lo[l, j] - z
                    if diff < 0.0:
                        diff = z - box_hi[l, j]
                        if diff < 0.0:
                            diff = 0.0
                    dl += diff * diff
                    diff = box_lo[r, j] - z
                    if diff < 0.0:
                        diff = z - box_hi[r, j]
                        if diff < 0.0:
                            diff = 0.0
                    dr += diff * diff
                cl = (end[l] - start[l]) - (1 if start[l] <= qp < end[l] else 0)
                cr = (end[r] - start[r]) - (1 if start[r] <= qp < end[r] else 0)
                logwl = log(<double>cl if cl > 0 else 1e-300) - dl
                logwr = log(<double>cr if cr > 0 else 1e-300) - dr
                z = logwr - logwl
                if z > 700.0:
                    z = 700.0
                elif z < -700.0:
                    z = -700.0
                pl = 1.0 / (1.0 + exp(z))
                u = uniforms[qi, mi, level]
                if u < pl:
                    node = l
                    z = pl
                else:
                    node = r
                    z = 1.0 - pl
                if z < 1e-300:
                    z = 1e-300
                lp += log(z)
                level += 1
            # leaf: exact-kernel draw, query excluded
            cnt = end[node] - start[node]
            if cnt > 256:
                cnt = 256
            tot = 0.0
            for jj in range(cnt):
                pidx = order[start[node] + jj]
                acc = 0.0
                for j in range(D):
                    diff = feats[pidx, j] - feats[self_idx, j]
                    acc += diff * diff
                k = 0.0 if pidx == self_idx else exp(-acc)
                tot += k
                wbuf[jj] = tot
                pbuf[jj] = pidx
            if tot <= 0.0:
                tot = 0.0
                for jj in range(cnt):
                    tot += 0.0 if pbuf[jj] == self_idx else 1.0
                    wbuf[jj] = tot
            u = uniforms[qi, mi, max_level]
            best = cnt - 1
            for jj in range(cnt):
                if wbuf[jj] / tot > u:
                    best = jj
                    break
            pidx = pbuf[best]
            acc = 0.0
            for j in range(D):
                diff = feats[pidx, j] - feats[self_idx, j]
                acc += diff * diff
            idx[qi, mi] = pidx
            kval[qi, mi] = exp(-acc)
            z = wbuf[best] - (wbuf[best - 1] if best > 0 else 0.0)
            pdf[qi, mi] = exp(lp) * (z / tot)
    return idx, kval, pdf
