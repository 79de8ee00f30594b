"""Lambert + GGX microfacet reflectance with analytic parameter derivatives.

The specular term is classic Trowbridge-Reitz D with height-correlated
Smith shadowing and Schlick Fresnel; the diffuse lobe is Lambert scaled by
(1 - F(n.wi)) (1 - F(n.wo)) so the two lobes share the Fresnel energy
split and the white-furnace integral stays bounded by 1 for any albedo.
Fresnel reflectance at normal incidence is fixed (dielectric); only albedo
and roughness are optimized.

All direction arguments are unit vectors; functions are vectorized over a
flat batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateGeometry
from .surfels import ROUGHNESS_EPS, tangent_frame

_compiled_shade_terms = getattr(_kernels, "shade_terms", None) \
    if _kernels.BACKEND == "compiled" else None

SPECULAR_F0 = 0.04
DENOM_CLAMP = 1e-4
GEOM_EPS = 1e-4
N_SPEC = 128
N_DIFF = 64


@dataclass
class BrdfParams:
    albedo: np.ndarray
    roughness: float
    specular_f0: np.ndarray | float = SPECULAR_F0

    def __post_init__(self):
        self.albedo = np.clip(np.asarray(self.albedo, dtype=np.float64), 0.0, 1.0)
        self.roughness = float(
            np.clip(self.roughness, ROUGHNESS_EPS, 1.0 - ROUGHNESS_EPS))
        self.specular_f0 = np.broadcast_to(
            np.asarray(self.specular_f0, dtype=np.float64), (3,)).copy()


@dataclass
class DirectionSample:
    omega_i: np.ndarray
    pdf: float
    lobe: str  # "specular" | "diffuse"


@dataclass
class DirectionSet:
    """Batch of light-sample directions with their own-lobe densities."""

    dirs: np.ndarray      # (M, 3)
    pdf: np.ndarray       # (M,) density under the lobe that drew the sample
    lobe: np.ndarray      # (M,) 0 = specular, 1 = diffuse
    point: np.ndarray     # (M,) surfel/batch index each sample belongs to
    n_spec: int
    n_diff: int

    def __len__(self) -> int:
        return len(self.dirs)

    def samples(self):
        for i in range(len(self.dirs)):
            yield DirectionSample(
                omega_i=self.dirs[i],
                pdf=float(self.pdf[i]),
                lobe="specular" if self.lobe[i] == 0 else "diffuse",
            )


# ---------------------------------------------------------------------------
# evaluation


def _dots(n, wi, wo):
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    n, wi, wo = np.broadcast_arrays(n, wi, wo)
    half = wi + wo
    hn = np.linalg.norm(half, axis=1, keepdims=True)
    h = np.where(hn > 1e-12, half / np.maximum(hn, 1e-12), n)
    mu_i = np.sum(n * wi, axis=1)
    mu_o = np.sum(n * wo, axis=1)
    mu_h = np.sum(n * h, axis=1)
    c = np.clip(np.sum(h * wo, axis=1), 0.0, 1.0)
    return n, wi, wo, h, mu_i, mu_o, mu_h, c


def ggx_d(mu_h, alpha):
    """Trowbridge-Reitz normal distribution at cos(half angle) = mu_h."""
    a2 = alpha * alpha
    q = 1.0 + (a2 - 1.0) * mu_h * mu_h
    return a2 / (np.pi * q * q)


def smith_g(mu_i, mu_o, alpha):
    """Height-correlated Smith masking-shadowing for GGX."""
    a2 = alpha * alpha
    li = np.sqrt(a2 + (1.0 - a2) * mu_i * mu_i)
    lo = np.sqrt(a2 + (1.0 - a2) * mu_o * mu_o)
    return 2.0 * mu_i * mu_o / np.maximum(mu_o * li + mu_i * lo, 1e-300)

def fresnel_schlick(c, f0):
    """Schlick with the grazing term scaled by f90 = min(50 f0, 1), so a
    zero f0 means no specular interface at all (F identically 0)."""
    c = np.asarray(c, dtype=np.float64)
    f90 = np.clip(50.0 * f0, 0.0, 1.0)
    return f0 + (f90 - f0) * (1.0 - c[..., None]) ** 5


def eval_brdf_parts(albedo, alpha, f0, n, wi, wo):
    """(diffuse, specular) parts, each (m, 3); zero where backfacing."""
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    f0 = np.atleast_2d(np.asarray(f0, dtype=np.float64))
    n, wi, wo, h, mu_i, mu_o, mu_h, c = _dots(n, wi, wo)
    valid = (mu_i > 0.0) & (mu_o > 0.0)
    fres = fresnel_schlick(c, f0)
    f_i = fresnel_schlick(np.clip(mu_i, 0.0, 1.0), f0)
    f_o = fresnel_schlick(np.clip(mu_o, 0.0, 1.0), f0)
    diffuse = albedo / np.pi * (1.0 - f_i) * (1.0 - f_o)
    d = ggx_d(mu_h, alpha)
    g = smith_g(np.abs(mu_i), np.abs(mu_o), alpha)
    denom = np.maximum(4.0 * mu_i * mu_o, DENOM_CLAMP)
    spec = (d * g / denom)[:, None] * fres
    mask = valid[:, None]
    return np.where(mask, diffuse, 0.0), np.where(mask, spec, 0.0)


def eval_brdf(params: BrdfParams, n, wi, wo):
    """Reflectance (per steradian) for one parameter set; also accepts a
    batch of directions against the shared parameters."""
    diff, spec = eval_brdf_parts(params.albedo, params.roughness,
                                 params.specular_f0, n, wi, wo)
    out = diff + spec
    return out[0] if np.ndim(wi) == 1 else out


def brdf_gradients(params: BrdfParams, n, wi, wo):
    """Analytic partials for one configuration.

    Returns (d_albedo, d_alpha, d_n): per-channel diagonal albedo
    coefficients (3,), roughness derivative per channel (3,), and the
    normal Jacobian (3, 3) projected to the tangent plane of n.
    Raises DegenerateGeometry when either cosine is below GEOM_EPS.
    """
    d_alb, d_alpha, d_n, valid = brdf_gradients_flat(
        params.albedo, params.roughness, params.specular_f0, n, wi, wo)
    if not valid[0]:
        raise DegenerateGeometry("cosines below 1e-4")
    return d_alb[0], d_alpha[0], d_n[0]


def brdf_gradients_flat(albedo, alpha, f0, n, wi, wo):
    """Vectorized analytic partials; invalid rows return zeros.

    Returns (d_albedo (m, 3), d_alpha (m, 3), d_n (m, 3, 3), valid (m,)).
    d_n rows are per output channel, already projected onto the tangent
    plane of the shading normal.
    """
    d_alb, d_alpha, d_n_diff, d_n_spec, valid = brdf_gradient_lobes(
        albedo, alpha, f0, n, wi, wo)
    return d_alb, d_alpha, d_n_diff + d_n_spec, valid


def brdf_gradient_lobes(albedo, alpha, f0, n, wi, wo):
    """As brdf_gradients_flat but with the normal Jacobian split by lobe:
    (d_albedo, d_alpha, d_n_diffuse, d_n_specular, valid)."""
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    f0 = np.atleast_2d(np.asarray(f0, dtype=np.float64))
    n, wi, wo, h, mu_i, mu_o, mu_h, c = _dots(n, wi, wo)
    m = len(mu_i)
    valid = (mu_i > GEOM_EPS) & (mu_o > GEOM_EPS)
    mu_i = np.maximum(mu_i, 1e-9)
    mu_o = np.maximum(mu_o, 1e-9)

    a2 = alpha * alpha
    q = 1.0 + (a2 - 1.0) * mu_h * mu_h
    d = a2 / (np.pi * q * q)
    li = np.sqrt(a2 + (1.0 - a2) * mu_i * mu_i)
    lo = np.sqrt(a2 + (1.0 - a2) * mu_o * mu_o)
    s = mu_o * li + mu_i * lo
    g = 2.0 * mu_i * mu_o / s
    fres = fresnel_schlick(c, f0)
    f_i = fresnel_schlick(np.clip(mu_i, 0.0, 1.0), f0)
    f_o = fresnel_schlick(np.clip(mu_o, 0.0, 1.0), f0)
    denom_raw = 4.0 * mu_i * mu_o
    clamped = denom_raw < DENOM_CLAMP
    denom = np.maximum(denom_raw, DENOM_CLAMP)

    # albedo: diffuse is linear, specular has no albedo term
    d_albedo = np.where(valid[:, None], (1.0 - f_i) * (1.0 - f_o) / np.pi, 0.0)

    # roughness
    dd_da = 2.0 * alpha * (q - 2.0 * a2 * mu_h * mu_h) / (np.pi * q**3)
    dli_da = alpha * (1.0 - mu_i * mu_i) / li
    dlo_da = alpha * (1.0 - mu_o * mu_o) / lo
    ds_da = mu_o * dli_da + mu_i * dlo_da
    dg_da = -g * ds_da / s
    d_alpha_scalar = (dd_da * g + d * dg_da) / denom
    d_alpha = np.where(valid[:, None], d_alpha_scalar[:, None] * fres, 0.0)

    # normal, through mu_i, mu_o, mu_h (h does not depend on n)
    dd_dmuh = -4.0 * a2 * (a2 - 1.0) * mu_h / (np.pi * q**3)
    dli_dmui = (1.0 - a2) * mu_i / li
    dlo_dmuo = (1.0 - a2) * mu_o / lo
    ds_dmui = mu_o * dli_dmui + lo
    ds_dmuo = mu_i * dlo_dmuo + li
    dg_dmui = 2.0 * mu_o / s - g * ds_dmui / s
    dg_dmuo = 2.0 * mu_i / s - g * ds_dmuo / s
    dinv_denom_dmui = np.where(clamped, 0.0, -4.0 * mu_o / (denom * denom))
    dinv_denom_dmuo = np.where(clamped, 0.0, -4.0 * mu_i / (denom * denom))
    k_mui = d * (dg_dmui / denom + g * dinv_denom_dmui)
    k_muo = d * (dg_dmuo / denom + g * dinv_denom_dmuo)
    k_muh = dd_dmuh * g / denom
    # specular channel c gradient: fres_c * (k_mui wi + k_muo wo + k_muh h)
    vec = (k_mui[:, None] * wi + k_muo[:, None] * wo + k_muh[:, None] * h)
    d_n_spec = fres[:, :, None] * vec[:, None, :]
    # diffuse: the Fresnel coupling factors depend on mu_i and mu_o
    ci = np.clip(mu_i, 0.0, 1.0)
    co = np.clip(mu_o, 0.0, 1.0)
    f90 = np.clip(50.0 * f0, 0.0, 1.0)
    dfi = 5.0 * (f90 - f0) * (1.0 - ci[:, None]) ** 4
    dfo = 5.0 * (f90 - f0) * (1.0 - co[:, None]) ** 4
    dd_mui = albedo / np.pi * dfi * (1.0 - f_o)
    dd_muo = albedo / np.pi * (1.0 - f_i) * dfo
    d_n_diff = dd_mui[:, :, None] * wi[:, None, :] \
        + dd_muo[:, :, None] * wo[:, None, :]

    def _finish(j):
        proj = np.sum(j * n[:, None, :], axis=2)
        j = j - proj[:, :, None] * n[:, None, :]
        return np.where(valid[:, None, None], j, 0.0)

    return d_albedo, d_alpha, _finish(d_n_diff), _finish(d_n_spec), valid


# ---------------------------------------------------------------------------
# sampling


def shade_terms(albedo, alpha, f0, n, wi, wo, diffuse: str = "cosine",
                with_grads: bool = False) -> dict:
    """Everything the shading estimator needs in one pass over shared
    intermediates: BRDF lobe values, both lobe pdfs at each direction, and
    (optionally) the analytic parameter gradients in factored form.

    All inputs are flat per-sample arrays.  Returned dict keys: f_diff,
    f_spec, p_spec, p_diff, cos_i, valid, and with gradients also
    d_albedo, d_alpha, jac_spec_rgb, jac_spec_vec, jac_diff_rgb_i,
    jac_diff_rgb_o, wi, wo (the normal Jacobian for channel c is
    jac_spec_rgb[c] * jac_spec_vec + jac_diff_rgb_i[c] * wi
    + jac_diff_rgb_o[c] * wo, before tangent projection).

    Dispatches to the compiled kernel when available; the NumPy body below
    is the reference fallback.
    """
    f0_arr = np.asarray(f0, dtype=np.float64).reshape(-1)
    if _compiled_shade_terms is not None and f0_arr.size == 3:
        n2, wi2, wo2 = np.broadcast_arrays(
            np.atleast_2d(np.asarray(n, dtype=np.float64)),
            np.atleast_2d(np.asarray(wi, dtype=np.float64)),
            np.atleast_2d(np.asarray(wo, dtype=np.float64)))
        m = len(n2)
        alb2 = np.broadcast_to(
            np.atleast_2d(np.asarray(albedo, dtype=np.float64)), (m, 3))
        al2 = np.broadcast_to(
            np.atleast_1d(np.asarray(alpha, dtype=np.float64)), (m,))
        return _compiled_shade_terms(alb2, al2, f0_arr, n2, wi2, wo2,
                                     int(diffuse == "cosine"),
                                     int(with_grads))
    return _shade_terms_numpy(albedo, alpha, f0, n, wi, wo, diffuse,
                              with_grads)


def _shade_terms_numpy(albedo, alpha, f0, n, wi, wo, diffuse: str = "cosine",
                       with_grads: bool = False) -> dict:
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    f0 = np.atleast_2d(np.asarray(f0, dtype=np.float64))
    n, wi, wo, h, mu_i, mu_o, mu_h, c = _dots(n, wi, wo)
    valid = (mu_i > 0.0) & (mu_o > 0.0)
    mu_i_s = np.maximum(mu_i, 1e-9)
    mu_o_s = np.maximum(mu_o, 1e-9)

    f90 = np.clip(50.0 * f0, 0.0, 1.0)
    span = f90 - f0
    fres = f0 + span * (1.0 - c[:, None]) ** 5
    ci = np.clip(mu_i, 0.0, 1.0)
    co = np.clip(mu_o, 0.0, 1.0)
    one_m_ci = 1.0 - ci[:, None]
    one_m_co = 1.0 - co[:, None]
    f_i = f0 + span * one_m_ci**4 * one_m_ci
    f_o = f0 + span * one_m_co**4 * one_m_co

    a2 = alpha * alpha
    q = 1.0 + (a2 - 1.0) * mu_h * mu_h
    d = a2 / (np.pi * q * q)
    li = np.sqrt(a2 + (1.0 - a2) * mu_i_s * mu_i_s)
    lo = np.sqrt(a2 + (1.0 - a2) * mu_o_s * mu_o_s)
    s = mu_o_s * li + mu_i_s * lo
    g = 2.0 * mu_i_s * mu_o_s / s
    denom_raw = 4.0 * mu_i_s * mu_o_s
    denom = np.maximum(denom_raw, DENOM_CLAMP)

    mask = valid[:, None]
    inv_pi = 1.0 / np.pi
    coupling = (1.0 - f_i) * (1.0 - f_o)
    f_diff = np.where(mask, albedo * inv_pi * coupling, 0.0)
    spec_scalar = d * g / denom
    f_spec = np.where(mask, spec_scalar[:, None] * fres, 0.0)

    # lobe densities at these directions
    how = np.sum(h * wo, axis=1)
    mu_h_c = np.clip(mu_h, 0.0, 1.0)
    p_spec = np.where((how > 0) & (mu_h > 0),
                      ggx_d(mu_h_c, alpha) * mu_h_c
                      / np.maximum(4.0 * how, 1e-12), 0.0)
    if diffuse == "cosine":
        p_diff = np.maximum(mu_i, 0.0) * inv_pi
    else:
        p_diff = np.where(mu_i > 0, 1.0 / (2.0 * np.pi), 0.0)

    out = {"f_diff": f_diff, "f_spec": f_spec, "p_spec": p_spec,
           "p_diff": p_diff, "cos_i": np.maximum(mu_i, 0.0), "valid": valid}
    if not with_grads:
        return out

    clamped = denom_raw < DENOM_CLAMP
    out["d_albedo"] = np.where(mask, inv_pi * coupling, 0.0)

    dd_da = 2.0 * alpha * (q - 2.0 * a2 * mu_h * mu_h) / (np.pi * q**3)
    dli_da = alpha * (1.0 - mu_i_s * mu_i_s) / li
    dlo_da = alpha * (1.0 - mu_o_s * mu_o_s) / lo
    ds_da = mu_o_s * dli_da + mu_i_s * dlo_da
    dg_da = -g * ds_da / s
    out["d_alpha"] = np.where(
        mask, ((dd_da * g + d * dg_da) / denom)[:, None] * fres, 0.0)

    dd_dmuh = -4.0 * a2 * (a2 - 1.0) * mu_h / (np.pi * q**3)
    dli_dmui = (1.0 - a2) * mu_i_s / li
    dlo_dmuo = (1.0 - a2) * mu_o_s / lo
    ds_dmui = mu_o_s * dli_dmui + lo
    ds_dmuo = mu_i_s * dlo_dmuo + li
    dg_dmui = 2.0 * mu_o_s / s - g * ds_dmui / s
    dg_dmuo = 2.0 * mu_i_s / s - g * ds_dmuo / s
    dinv_dmui = np.where(clamped, 0.0, -4.0 * mu_o_s / (denom * denom))
    dinv_dmuo = np.where(clamped, 0.0, -4.0 * mu_i_s / (denom * denom))
    k_mui = d * (dg_dmui / denom + g * dinv_dmui)
    k_muo = d * (dg_dmuo / denom + g * dinv_dmuo)
    k_muh = dd_dmuh * g / denom
    vmask = valid[:, None]
    vec = k_mui[:, None] * wi + k_muo[:, None] * wo + k_muh[:, None] * h
    dfi = 5.0 * span * one_m_ci**4
    dfo = 5.0 * span * one_m_co**4
    dd_mui = albedo * inv_pi * dfi * (1.0 - f_o)
    dd_muo = albedo * inv_pi * (1.0 - f_i) * dfo
    # factored normal Jacobians: d_n_spec[c] = fres_c * vec,
    # d_n_diff[c] = dd_mui_c * wi + dd_muo_c * wo (tangent-projection is
    # linear and applied by consumers after point aggregation)
    out["jac_spec_rgb"] = np.where(vmask, fres, 0.0)
    out["jac_spec_vec"] = vec
    out["jac_diff_rgb_i"] = np.where(vmask, dd_mui, 0.0)
    out["jac_diff_rgb_o"] = np.where(vmask, dd_muo, 0.0)
    out["wi"] = wi
    out["wo"] = wo
    return out


def sample_ggx_half(alpha, n, u) -> np.ndarray:
    """Sample microfacet half-vectors from the GGX density D(h) |n.h|."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    u1, u2 = u[:, 0], u[:, 1]
    tan2 = alpha * alpha * u1 / np.maximum(1.0 - u1, 1e-12)
    cos_t = 1.0 / np.sqrt(1.0 + tan2)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, 1.0))
    phi = 2.0 * np.pi * u2
    t1, t2 = tangent_frame(n)
    return (sin_t * np.cos(phi))[:, None] * t1 \
        + (sin_t * np.sin(phi))[:, None] * t2 + cos_t[:, None] * n


def sample_cosine(n, u) -> np.ndarray:
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    r = np.sqrt(u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    z = np.sqrt(np.clip(1.0 - u[:, 0], 0.0, 1.0))
    t1, t2 = tangent_frame(n)
    return (r * np.cos(phi))[:, None] * t1 + (r * np.sin(phi))[:, None] * t2 \
        + z[:, None] * n


def sample_uniform_hemisphere(n, u) -> np.ndarray:
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    z = u[:, 0]
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    phi = 2.0 * np.pi * u[:, 1]
    t1, t2 = tangent_frame(n)
    return (r * np.cos(phi))[:, None] * t1 + (r * np.sin(phi))[:, None] * t2 \
        + z[:, None] * n


def pdf_ggx(alpha, n, wo, wi) -> np.ndarray:
    """Density of reflected GGX-NDF samples, per steradian in wi."""
    n, wi, wo, h, _, _, mu_h, _ = _dots(n, wi, wo)
    how = np.sum(h * wo, axis=1)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    d = ggx_d(np.clip(mu_h, 0.0, 1.0), alpha)
    pdf = d * np.clip(mu_h, 0.0, 1.0) / np.maximum(4.0 * how, 1e-12)
    return np.where((how > 0) & (mu_h > 0), pdf, 0.0)


def pdf_cosine(n, wi) -> np.ndarray:
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    return np.maximum(np.sum(n * wi, axis=1), 0.0) / np.pi


def pdf_uniform_hemisphere(n, wi) -> np.ndarray:
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    return np.where(np.sum(n * wi, axis=1) > 0, 1.0 / (2.0 * np.pi), 0.0)


def sample_direction(params: BrdfParams, n, wo, rng,
                     n_spec: int = N_SPEC, n_diff: int = N_DIFF,
                     diffuse: str = "cosine") -> DirectionSet:
    """Draw the per-point light sample set: ``n_spec`` roughness-driven GGX
    samples plus ``n_diff`` hemisphere samples.

    Below-horizon reflections are dropped (their integrand is exactly
    zero); estimator weights still divide by the full lobe counts.
    """
    n1 = np.asarray(n, dtype=np.float64).reshape(1, 3)
    wo1 = np.asarray(wo, dtype=np.float64).reshape(1, 3)
    alpha = np.full(1, params.roughness)
    return sample_direction_batch(
        alpha, n1, wo1, rng, n_spec, n_diff, diffuse)


def sample_direction_batch(alpha, normals, wos, rng,
                           n_spec: int = N_SPEC, n_diff: int = N_DIFF,
                           diffuse: str = "cosine",
                           u_spec=None, u_diff=None,
                           defer_pdf: bool = False) -> DirectionSet:
    """Light sample sets for a batch of shading points (flattened).

    Uniforms come from ``rng`` unless explicit (s * n_lobe, 2) arrays are
    supplied (used for per-pixel RNG streams).  ``defer_pdf`` leaves the
    pdf array zeroed for callers that recompute both lobe densities anyway
    (they must fill it before anything reads dset.pdf).
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    wos = np.atleast_2d(np.asarray(wos, dtype=np.float64))
    s = len(alpha)
    t1, t2 = tangent_frame(normals)

    dirs = []
    pdfs = []
    lobes = []
    points = []
    if n_spec > 0:
        u = u_spec if u_spec is not None else rng.random((s * n_spec, 2))
        rep_n = np.repeat(normals, n_spec, axis=0)
        rep_wo = np.repeat(wos, n_spec, axis=0)
        rep_a = np.repeat(alpha, n_spec)
        h = _ggx_half_from_frame(rep_a, rep_n,
                                 np.repeat(t1, n_spec, axis=0),
                                 np.repeat(t2, n_spec, axis=0), u)
        how = np.sum(h * rep_wo, axis=1)
        wi = 2.0 * how[:, None] * h - rep_wo
        keep = (np.sum(wi * rep_n, axis=1) > 0) & (how > 0)
        if defer_pdf:
            pdf = np.zeros(int(keep.sum()))
        else:
            pdf = pdf_ggx(rep_a[keep], rep_n[keep], rep_wo[keep], wi[keep])
        dirs.append(wi[keep])
        pdfs.append(pdf)
        lobes.append(np.zeros(keep.sum(), dtype=np.uint8))
        points.append(np.repeat(np.arange(s), n_spec)[keep])
    if n_diff > 0:
        u = u_diff if u_diff is not None else rng.random((s * n_diff, 2))
        rep_n = np.repeat(normals, n_diff, axis=0)
        rt1 = np.repeat(t1, n_diff, axis=0)
        rt2 = np.repeat(t2, n_diff, axis=0)
        if diffuse == "cosine":
            r = np.sqrt(u[:, 0])
            phi = 2.0 * np.pi * u[:, 1]
            z = np.sqrt(np.clip(1.0 - u[:, 0], 0.0, 1.0))
            wi = (r * np.cos(phi))[:, None] * rt1 \
                + (r * np.sin(phi))[:, None] * rt2 + z[:, None] * rep_n
            keep = z > 0
            if defer_pdf:
                pdf = np.zeros(int(keep.sum()))
            else:
                pdf = np.maximum(
                    (wi[keep] * rep_n[keep]).sum(axis=1), 0.0) / np.pi
        elif diffuse == "uniform":
            z = u[:, 0]
            r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
            phi = 2.0 * np.pi * u[:, 1]
            wi = (r * np.cos(phi))[:, None] * rt1 \
                + (r * np.sin(phi))[:, None] * rt2 + z[:, None] * rep_n
            keep = z > 0
            if defer_pdf:
                pdf = np.zeros(int(keep.sum()))
            else:
                pdf = np.full(int(keep.sum()), 1.0 / (2.0 * np.pi))
        else:
            raise ValueError(f"unknown diffuse sampling {diffuse!r}")
        dirs.append(wi[keep])
        pdfs.append(pdf)
        lobes.append(np.ones(int(keep.sum()), dtype=np.uint8))
        points.append(np.repeat(np.arange(s), n_diff)[keep])

    return DirectionSet(
        dirs=np.concatenate(dirs) if dirs else np.zeros((0, 3)),
        pdf=np.concatenate(pdfs) if pdfs else np.zeros(0),
        lobe=np.concatenate(lobes) if lobes else np.zeros(0, dtype=np.uint8),
        point=np.concatenate(points) if points else np.zeros(0, dtype=np.int64),
        n_spec=n_spec,
        n_diff=n_diff,
    )


def _ggx_half_from_frame(alpha, n, t1, t2, u):
    u1, u2 = u[:, 0], u[:, 1]
    tan2 = alpha * alpha * u1 / np.maximum(1.0 - u1, 1e-12)
    cos_t = 1.0 / np.sqrt(1.0 + tan2)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, 1.0))
    phi = 2.0 * np.pi * u2
    return (sin_t * np.cos(phi))[:, None] * t1 \
        + (sin_t * np.sin(phi))[:, None] * t2 + cos_t[:, None] * n


def estimator_weights(dset: DirectionSet, alpha, normals, wos,
                      mis: bool = True, diffuse: str = "cosine") -> np.ndarray:
    """Per-sample inverse-density weights for the shading estimator.

    With ``mis`` the two lobes are combined by the balance heuristic
    (weight 1 / (n_spec p_spec + n_diff p_diff), full integrand per
    sample); otherwise each sample set estimates only its own lobe's term
    at weight 1 / (n_lobe p_own), the plain two-set summation.
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    wos = np.atleast_2d(np.asarray(wos, dtype=np.float64))
    pi = dset.point
    if mis:
        p_s = pdf_ggx(alpha[pi], normals[pi], wos[pi], dset.dirs)
        if diffuse == "cosine":
            p_d = pdf_cosine(normals[pi], dset.dirs)
        else:
            p_d = pdf_uniform_hemisphere(normals[pi], dset.dirs)
        denom = dset.n_spec * p_s + dset.n_diff * p_d
        return 1.0 / np.maximum(denom, 1e-300)
    counts = np.where(dset.lobe == 0, dset.n_spec, dset.n_diff)
    return 1.0 / np.maximum(counts * dset.pdf, 1e-300)
