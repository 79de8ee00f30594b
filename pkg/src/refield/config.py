"""Run configuration: one flat, JSON-serializable record of every tunable.

Unknown keys are rejected and every value is range-validated at load so a
typo in a config file fails fast instead of silently training with
defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields


@dataclass
class Config:
    seed: int = 0
    threads: int = 0  # 0 = leave BLAS/OpenMP settings alone

    # quadrature / extraction
    steps_per_unit: int = 256
    tau_hit: float = 0.5
    bisect_tol_fraction: float = 1.0 / 16.0  # of a voxel
    normal_radius_voxels: float = 1.5
    normal_samples: int = 32

    # octree
    octree_max_depth: int = 8
    octree_leaf_brick: int = 4
    visibility_offset_voxels: float = 2.0

    # bilateral priors
    bw_position_voxels: float = 3.0
    bw_normal: float = 0.3
    bw_albedo: float = 0.15
    bw_roughness: float = 0.1
    bw_visibility: float = 0.5
    bw_parsimony: float = 0.2
    neighbor_samples: int = 8
    kmeans_k: int = 16
    keep_per_cluster: int = 4
    smooth_norm: str = "l1"
    smooth_attrs: tuple = ("normal", "albedo", "roughness", "visibility")

    # shading
    n_spec: int = 128
    n_diff: int = 64
    mis: bool = True
    diffuse_sampling: str = "cosine"
    specular_f0: float = 0.04
    env_resolution: int = 16

    # optimization
    batch_size: int = 1024
    stage_a_epochs: int = 100
    warmup_epochs: int = 100
    joint_epochs: int = 200
    lr_albedo: float = 1e-2
    lr_roughness: float = 1e-2
    lr_visibility: float = 1e-2
    lr_normal: float = 5e-3
    lr_env: float = 2e-2

    # loss weights
    lambda_render: float = 1.0
    lambda_commitment_warmup: float = 0.5
    lambda_commitment_joint: float = 0.1
    lambda_smooth_albedo: float = 0.5
    lambda_smooth_roughness: float = 0.01
    lambda_smooth_shape: float = 0.1
    lambda_parsimony_albedo: float = 0.1
    lambda_parsimony_roughness: float = 0.005
    lambda_env_smooth: float = 1.0
    warmup_prior_scale: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("steps_per_unit", "normal_samples", "octree_max_depth",
                    "octree_leaf_brick", "neighbor_samples", "kmeans_k",
                    "keep_per_cluster", "n_spec", "n_diff", "batch_size",
                    "env_resolution")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        unit = ("tau_hit", "specular_f0", "warmup_prior_scale")
        for name in unit:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        nonneg = [f.name for f in fields(self)
                  if f.name.startswith(("lambda_", "lr_", "bw_"))]
        nonneg += ["bisect_tol_fraction", "normal_radius_voxels",
                   "visibility_offset_voxels"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("stage_a_epochs", "warmup_epochs", "joint_epochs",
                     "threads"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.smooth_norm not in ("l1", "l2"):
            raise ValueError("smooth_norm must be 'l1' or 'l2'")
        if self.diffuse_sampling not in ("cosine", "uniform"):
            raise ValueError("diffuse_sampling must be 'cosine' or 'uniform'")
        allowed = {"normal", "albedo", "roughness", "visibility"}
        extra = set(self.smooth_attrs) - allowed
        if extra:
            raise ValueError(f"unknown smooth_attrs {sorted(extra)}")
        env = self.env_resolution
        if env & (env - 1) != 0:
            raise ValueError("env_resolution must be a power of two")

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "smooth_attrs" in data:
            data = dict(data)
            data["smooth_attrs"] = tuple(data["smooth_attrs"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        data = asdict(self)
        data["smooth_attrs"] = list(self.smooth_attrs)
        with open(path, "w") as f:
            json.dump(data, f, indent=1)

    # adapters to module-level option records -------------------------------

    def render_config(self):
        from .render import RenderConfig

        return RenderConfig(
            n_spec=self.n_spec, n_diff=self.n_diff, seed=self.seed,
            mis=self.mis, diffuse_sampling=self.diffuse_sampling,
            steps_per_unit=self.steps_per_unit, tau_hit=self.tau_hit,
            specular_f0=self.specular_f0)

    def schedule(self):
        from .decompose import StageSchedule

        return StageSchedule(
            stage_a_epochs=self.stage_a_epochs,
            warmup_epochs=self.warmup_epochs,
            joint_epochs=self.joint_epochs, batch_size=self.batch_size,
            lr_albedo=self.lr_albedo, lr_roughness=self.lr_roughness,
            lr_visibility=self.lr_visibility, lr_normal=self.lr_normal,
            lr_env=self.lr_env)

    def loss_weights(self):
        from .decompose import LossWeights

        return LossWeights(
            render=self.lambda_render,
            commitment_warmup=self.lambda_commitment_warmup,
            commitment_joint=self.lambda_commitment_joint,
            smooth_albedo=self.lambda_smooth_albedo,
            smooth_roughness=self.lambda_smooth_roughness,
            smooth_shape=self.lambda_smooth_shape,
            parsimony_albedo=self.lambda_parsimony_albedo,
            parsimony_roughness=self.lambda_parsimony_roughness,
            env_smooth=self.lambda_env_smooth,
            warmup_prior_scale=self.warmup_prior_scale)

    def gkd_params(self):
        return {
            "pos_bw_voxels": self.bw_position_voxels,
            "bw_normal": self.bw_normal,
            "bw_albedo": self.bw_albedo,
            "bw_roughness": self.bw_roughness,
            "bw_visibility": self.bw_visibility,
            "bw_parsimony": self.bw_parsimony,
            "m_samples": self.neighbor_samples,
            "kmeans_k": self.kmeans_k,
            "keep_per_cluster": self.keep_per_cluster,
        }
