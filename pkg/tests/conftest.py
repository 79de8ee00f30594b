import numpy as np
import pytest

from refield import octree, scenes


@pytest.fixture(scope="session")
def sphere_scene():
    return scenes.fixture_diffuse_sphere()


@pytest.fixture(scope="session")
def sphere_grid(sphere_scene):
    return scenes.bake_scene(sphere_scene, 48)


@pytest.fixture(scope="session")
def sphere_tree(sphere_grid):
    return octree.build_octree(sphere_grid)


@pytest.fixture(scope="session")
def sphere_cameras():
    return scenes.ring_cameras(8, resolution=48)


@pytest.fixture(scope="session")
def sphere_refs(sphere_scene, sphere_cameras):
    """(images, masks) from the analytic reference renderer."""
    imgs, masks = [], []
    for cam in sphere_cameras:
        img, hit = scenes.render_reference(sphere_scene, cam, n_samples=192,
                                           seed=11)
        imgs.append(img)
        masks.append(hit.astype(np.float64))
    return imgs, masks


@pytest.fixture(scope="session")
def sphere_cloud_gt(sphere_scene, sphere_grid, sphere_tree, sphere_cameras,
                    sphere_refs):
    """Extracted surfels carrying ground-truth materials (no optimization)."""
    from refield.decompose import extract_training_surfels
    from refield.render import RenderConfig

    imgs, masks = sphere_refs
    data = extract_training_surfels(
        sphere_grid, sphere_tree, sphere_cameras, imgs, masks,
        RenderConfig(n_spec=8, n_diff=8))
    cloud = data.cloud
    cloud.set_albedo(sphere_scene.gt_albedo(cloud.positions))
    cloud.set_roughness(sphere_scene.gt_roughness(cloud.positions))
    cloud.set_normals(sphere_scene.gt_normal(cloud.positions))
    # convex object: the true visibility is 1 over the whole upper hemisphere
    cloud.set_visibility(np.ones_like(cloud.visibility))
    cloud.invalidate_index()
    return data


@pytest.fixture(scope="session")
def double_layer():
    """(grid, info) for the two-slab failure-analysis geometry."""
    return scenes.bake_double_layer(dims_z=64)


def random_rays_hitting_slab(info, n, rng):
    """Rays roughly along +z through the double-layer slabs."""
    desc = info["desc"]
    lo = desc.bounds_min
    hi = desc.bounds_max
    xs = rng.uniform(lo[0] + 0.1, hi[0] - 0.1, n)
    ys = rng.uniform(lo[1] + 0.1, hi[1] - 0.1, n)
    origins = np.stack([xs, ys, np.full(n, lo[2] - 0.5)], axis=1)
    # small angular jitter, ray still crosses both slabs
    tilt = rng.uniform(-0.05, 0.05, (n, 2))
    dirs = np.stack([tilt[:, 0], tilt[:, 1], np.ones(n)], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs
