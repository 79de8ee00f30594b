import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refield.errors import OutOfBounds
from refield.grids import (DensityGrid, Ray, density_gradient, load_rfv,
                           sample_density, save_rfv)


def make_grid(sigma, origin=(-1, -1, -1), voxel=0.25):
    return DensityGrid(sigma=np.asarray(sigma, dtype=np.float32),
                       origin=np.asarray(origin, dtype=np.float64),
                       voxel_size=voxel)


def test_constant_field_interior():
    g = make_grid(np.full((8, 8, 8), 2.0))
    for x in ([0, 0, 0], [0.3, -0.2, 0.7], [-0.9, 0.9, 0.1]):
        assert sample_density(g, x) == pytest.approx(2.0)


def test_outside_bounds_is_zero():
    g = make_grid(np.full((8, 8, 8), 2.0))
    assert sample_density(g, [5.0, 0, 0]) == 0.0
    assert sample_density(g, [0, -1.01, 0]) == 0.0


def test_trilinear_cell_center():
    # 2x2x2 grid with alternating corners 0/1: the cell center averages them
    sig = np.zeros((2, 2, 2), dtype=np.float32)
    sig[0, 0, 0] = sig[1, 1, 0] = sig[1, 0, 1] = sig[0, 1, 1] = 1.0
    g = make_grid(sig, origin=(0, 0, 0), voxel=1.0)
    center = np.array([1.0, 1.0, 1.0])  # midpoint of the 8 voxel centers
    assert sample_density(g, center) == pytest.approx(0.5)


def test_gradient_constant_zero():
    g = make_grid(np.full((8, 8, 8), 3.0))
    assert np.allclose(density_gradient(g, [0.1, 0.2, -0.3]), 0.0)


def test_gradient_linear_ramp():
    n = 16
    xs = -1 + (np.arange(n) + 0.5) * (2.0 / n)
    ramp = 3.0 * xs + 4.0
    sig = np.broadcast_to(ramp[:, None, None], (n, n, n)).copy()
    g = make_grid(sig, voxel=2.0 / n)
    grad = density_gradient(g, [0.1, 0.05, -0.2])
    assert np.allclose(grad, [3.0, 0.0, 0.0], atol=1e-6)


def test_gradient_spherical_field():
    n = 64
    voxel = 2.0 / n
    xs = -1 + (np.arange(n) + 0.5) * voxel
    gx, gy, gz = np.meshgrid(xs, xs, xs, indexing="ij")
    r = np.sqrt(gx**2 + gy**2 + gz**2)
    sig = np.maximum(0.0, 0.8 - r)
    g = make_grid(sig, voxel=voxel)
    x = np.array([0.5, 0.0, 0.0])
    grad = density_gradient(g, x)
    direction = grad / np.linalg.norm(grad)
    assert np.allclose(direction, [-1.0, 0.0, 0.0], atol=1e-4)


def test_gradient_out_of_bounds_raises():
    g = make_grid(np.full((8, 8, 8), 1.0))
    with pytest.raises(OutOfBounds):
        density_gradient(g, [3.0, 0.0, 0.0])
    # inflated-by-one-voxel region is allowed
    density_gradient(g, [1.1, 0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 0.99), st.floats(0.01, 0.99),
       st.floats(0.01, 0.99))
def test_lipschitz_continuity(seed, fx, fy, fz):
    rng = np.random.default_rng(seed)
    sig = rng.uniform(0, 5, (6, 6, 6)).astype(np.float32)
    g = make_grid(sig, origin=(0, 0, 0), voxel=1.0)
    # global per-axis Lipschitz bound from adjacent-voxel differences
    lip = (np.abs(np.diff(sig, axis=0)).max()
           + np.abs(np.diff(sig, axis=1)).max()
           + np.abs(np.diff(sig, axis=2)).max())
    x = np.array([1.0 + 4 * fx, 1.0 + 4 * fy, 1.0 + 4 * fz])
    delta = rng.uniform(-0.4, 0.4, 3)
    a = sample_density(g, x)
    b = sample_density(g, x + delta)
    assert abs(a - b) <= lip * np.linalg.norm(delta, ord=1) + 1e-9


def test_rfv_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    sig = rng.uniform(0, 3, (5, 7, 6)).astype(np.float32)
    g = make_grid(sig, origin=(-0.5, 1.0, 2.0), voxel=0.125)
    path = tmp_path / "grid.rfv"
    save_rfv(path, g)
    g2 = load_rfv(path)
    assert g2.dims == (5, 7, 6)
    assert np.array_equal(g2.sigma, g.sigma)
    assert np.allclose(g2.origin, g.origin)
    assert g2.voxel_size == pytest.approx(0.125)


def test_rfv_x_fastest_order(tmp_path):
    sig = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    g = make_grid(sig, origin=(0, 0, 0), voxel=1.0)
    path = tmp_path / "g.rfv"
    save_rfv(path, g)
    raw = np.fromfile(path, dtype="<f4", offset=16 + 12 + 12 + 4)
    # first run of values must vary along x (the first sigma axis)
    assert raw[0] == sig[0, 0, 0]
    assert raw[1] == sig[1, 0, 0]


def test_ray_normalizes_direction():
    r = Ray(origin=[0, 0, 0], direction=[0, 0, 5.0], t_near=0.0, t_far=1.0)
    assert np.allclose(r.direction, [0, 0, 1])
    with pytest.raises(ValueError):
        Ray(origin=[0, 0, 0], direction=[0, 0, 1], t_near=1.0, t_far=0.5)


def test_invalid_grids_rejected():
    with pytest.raises(ValueError):
        make_grid(np.full((1, 4, 4), 1.0))
    with pytest.raises(ValueError):
        make_grid(np.full((4, 4, 4), -1.0))
    with pytest.raises(ValueError):
        DensityGrid(sigma=np.ones((4, 4, 4), dtype=np.float32),
                    origin=np.zeros(3), voxel_size=0.0)
