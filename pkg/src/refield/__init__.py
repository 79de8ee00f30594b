"""Reflectance-field decomposition of explicit density/radiance volumes.

Decomposes a voxel density field observed through posed multi-view images
into per-surfel albedo, roughness, normal, and directional light
visibility plus an HDR environment cube map; the result supports novel
view synthesis, relighting, and material editing.
"""

from ._kernels import BACKEND as kernel_backend
from .brdf import BrdfParams, eval_brdf, sample_direction
from .envmap import EnvCubeMap, env_smooth_loss, mip_level, sample_env
from .errors import (DegenerateGeometry, DegenerateNormal, NonFiniteLoss,
                     NoSurface, OutOfBounds, RefieldError, StaleTree,
                     TooFewPoints)
from .grids import DensityGrid, Ray, density_gradient, load_rfv, sample_density, save_rfv
from .octree import Octree, build_octree, knn_surfels, transmittance_fast, visibility
from .render import Camera, RenderConfig, render_image, render_loss, shade_point
from .surface import (TransmittanceProfile, extract_normal,
                      extract_surface_expected, extract_surface_median,
                      transmittance_profile)
from .surfels import Surfel, SurfelCloud, load_sfl, save_sfl

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BrdfParams", "Camera", "DensityGrid", "DegenerateGeometry",
    "DegenerateNormal", "EnvCubeMap", "NonFiniteLoss", "NoSurface",
    "Octree", "OutOfBounds", "Ray", "RefieldError", "RenderConfig",
    "StaleTree", "Surfel", "SurfelCloud", "TooFewPoints",
    "TransmittanceProfile", "build_octree", "density_gradient",
    "env_smooth_loss", "eval_brdf", "extract_normal",
    "extract_surface_expected", "extract_surface_median", "kernel_backend",
    "knn_surfels", "load_rfv", "load_sfl", "mip_level", "render_image",
    "render_loss", "sample_density", "sample_direction", "sample_env",
    "save_rfv", "save_sfl", "shade_point", "transmittance_fast",
    "transmittance_profile", "visibility",
]
