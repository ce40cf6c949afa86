import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dense_system_matrix, ray_endpoints, ray_voxel_lengths
from unrollct.core import FanBeamGeometry, Grid, Image, Sinogram, fan_beam
from unrollct.errors import InvalidArgument
from unrollct.projector import (backproject, bit_reversed_order, forward_project, noise_weights,
                                partition_subsets, project, sqs_denominator)


@pytest.fixture(scope="module")
def small():
    grid = Grid.centered((16, 16), 1.5)
    geom = fan_beam(8, grid, start=0.3)
    return grid, geom, dense_system_matrix(geom, grid)


def test_forward_matches_dense_oracle(small, backend):
    grid, geom, A = small
    x = np.random.default_rng(0).uniform(0, 1, grid.shape)
    got = project(x, grid, geom).ravel()
    ref = A @ x.ravel()
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-10


def test_single_ray_backprojection_matches_oracle(small, backend):
    grid, geom, _ = small
    for v, d in [(0, geom.n_det // 2), (3, 5), (7, geom.n_det - 3)]:
        s = np.zeros((geom.n_views, geom.n_det))
        s[v, d] = 1.0
        img = backproject(s, grid, geom)
        ref = ray_voxel_lengths(*ray_endpoints(geom, v, d), grid)
        np.testing.assert_allclose(img, ref, rtol=0, atol=1e-12)
        assert np.array_equal(img > 1e-12, ref > 1e-12)


@pytest.mark.parametrize("n", [8, 7])
def test_constant_image_along_grid_row(n, backend):
    grid = Grid.centered((n, n), 2.0)
    geom = FanBeamGeometry(500.0, 1000.0, 1.0, 1, [0.0])
    val = project(np.ones(grid.shape), grid, geom)
    assert val[0, 0] == pytest.approx(n * 2.0, abs=1e-12)
    geom90 = FanBeamGeometry(500.0, 1000.0, 1.0, 1, [np.pi / 2])
    assert project(np.ones(grid.shape), grid, geom90)[0, 0] == pytest.approx(n * 2.0, abs=1e-12)


def test_zero_in_zero_out(small, backend):
    grid, geom, _ = small
    assert not project(np.zeros(grid.shape), grid, geom).any()
    assert not backproject(np.zeros((geom.n_views, geom.n_det)), grid, geom).any()


def test_forward_project_image_api(small):
    grid, geom, A = small
    img = Image(np.full(grid.shape, 0.0), grid.spacing, grid.origin)   # water, mu = 0.02
    sino = forward_project(img, geom)
    np.testing.assert_allclose(sino.data.ravel(), 0.02 * A.sum(axis=1), rtol=1e-12, atol=1e-14)
    sub = forward_project(img, geom, views=[1, 4])
    np.testing.assert_array_equal(sub.data, sino.data[[1, 4]])
    np.testing.assert_array_equal(sub.geometry.angles, geom.angles[[1, 4]])


def test_linearity(small, backend):
    grid, geom, _ = small
    rng = np.random.default_rng(1)
    x, z = rng.normal(size=(2,) + grid.shape)
    lhs = project(2.5 * x - 0.7 * z, grid, geom)
    rhs = 2.5 * project(x, grid, geom) - 0.7 * project(z, grid, geom)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * np.abs(rhs).max())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.sampled_from([8, 13, 16, 32]),
       views=st.integers(1, 12), start=st.floats(0, 6.2))
def test_adjointness(seed, n, views, start):
    grid = Grid.centered((n, n), 1.0)
    geom = fan_beam(views, grid, start=start)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=grid.shape)
    y = rng.normal(size=(views, geom.n_det))
    Ax = project(x, grid, geom)
    lhs, rhs = np.vdot(Ax, y), np.vdot(x, backproject(y, grid, geom))
    assert abs(lhs - rhs) / (np.linalg.norm(Ax) * np.linalg.norm(y)) < 1e-10


def test_adjointness_numpy_backend(monkeypatch):
    monkeypatch.setenv("UNROLLCT_BACKEND", "numpy")
    grid = Grid.centered((16, 16), 1.0)
    geom = fan_beam(8, grid)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=grid.shape), rng.normal(size=(8, geom.n_det))
    Ax = project(x, grid, geom)
    assert abs(np.vdot(Ax, y) - np.vdot(x, backproject(y, grid, geom))) < \
        1e-10 * np.linalg.norm(Ax) * np.linalg.norm(y)


def test_backends_agree(small, monkeypatch):
    grid, geom, _ = small
    x = np.random.default_rng(4).normal(size=grid.shape)
    y = np.random.default_rng(5).normal(size=(geom.n_views, geom.n_det))
    monkeypatch.setenv("UNROLLCT_BACKEND", "numba")
    a, b = project(x, grid, geom), backproject(y, grid, geom)
    monkeypatch.setenv("UNROLLCT_BACKEND", "numpy")
    np.testing.assert_allclose(project(x, grid, geom), a, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(backproject(y, grid, geom), b, rtol=1e-12, atol=1e-12)


def test_slices_are_independent(backend):
    grid3 = Grid.centered((12, 12, 3), 1.0)
    grid2 = Grid.centered((12, 12), 1.0)
    geom = fan_beam(6, grid2)
    x = np.random.default_rng(6).normal(size=grid3.shape)
    p = project(x, grid3, geom)
    assert p.shape == (6, geom.n_det, 3)
    for k in range(3):
        np.testing.assert_allclose(p[:, :, k], project(x[:, :, k], grid2, geom), atol=1e-13)
    b = backproject(p, grid3, geom)
    np.testing.assert_allclose(b[:, :, 1], backproject(p[:, :, 1], grid2, geom), atol=1e-12)


def test_shape_mismatch_rejected(small):
    grid, geom, _ = small
    with pytest.raises(InvalidArgument):
        project(np.zeros((4, 4)), grid, geom)
    with pytest.raises(InvalidArgument):
        backproject(np.zeros((3, geom.n_det)), grid, geom)


# -- SQS denominator ------------------------------------------------------

def test_sqs_denominator_matches_dense(backend):
    grid = Grid.centered((16, 16), 1.5)
    geom = fan_beam(16, grid)
    A = dense_system_matrix(geom, grid)
    ref = (A.T @ (A @ np.ones(A.shape[1]))).reshape(grid.shape)
    got = sqs_denominator(geom, grid)
    assert np.max(np.abs(got - ref)) / ref.max() < 1e-10
    assert np.all(got >= 0)


def test_sqs_denominator_zero_weights(small):
    grid, geom, _ = small
    d = sqs_denominator(geom, grid, np.zeros((geom.n_views, geom.n_det)))
    assert not d.any()


def test_sqs_denominator_uncovered_corner():
    grid = Grid.centered((32, 32), 1.0)
    # a narrow fan over a short arc never reaches the corners
    geom = fan_beam(4, grid, fov_scale=0.3, arc=np.radians(20))
    d = sqs_denominator(geom, grid)
    assert d[0, 0] == 0 and d[-1, -1] == 0
    assert d[16, 16] > 0


def test_sqs_denominator_view_permutation(small):
    grid, geom, _ = small
    w = np.random.default_rng(7).uniform(0.5, 1.5, (geom.n_views, geom.n_det))
    perm = np.random.default_rng(8).permutation(geom.n_views)
    gp = geom.subset(np.sort(perm))  # same geometry; reorder by passing views explicitly
    a = sqs_denominator(geom, grid, w)
    b = sqs_denominator(gp, grid, w[np.sort(perm)])
    c = sqs_denominator(geom, grid, w[perm], views=perm)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12 * a.max())


# -- weights and subsets --------------------------------------------------

def test_noise_weights():
    g = FanBeamGeometry(500, 1000, 1.0, 3, [0.0])
    s = Sinogram(np.array([[0.0, np.log(2), 1.0]]), g)
    np.testing.assert_array_equal(noise_weights(s), np.ones((1, 3)))
    w = noise_weights(s, "transmission")
    assert w[0, 0] == 1.0 and w[0, 1] == pytest.approx(0.5, abs=1e-15)
    assert np.all((w > 0) & (w <= 1))
    with pytest.raises(InvalidArgument):
        noise_weights(s, "gaussian")


def test_partition_examples():
    np.testing.assert_array_equal(bit_reversed_order(8), [0, 4, 2, 6, 1, 5, 3, 7])
    p = partition_subsets(8, 4)
    assert [list(s) for s in p.subsets] == [[0, 4], [2, 6], [1, 5], [3, 7]]
    assert [list(s) for s in partition_subsets(4, 1).subsets] == [[0, 2, 1, 3]]


@pytest.mark.parametrize("n", [1, 5, 8, 36, 37, 144])
def test_partition_is_disjoint_cover(n):
    for M in sorted({1, min(2, n), min(8, n), n}):
        p = partition_subsets(n, M)
        flat = np.concatenate(p.subsets)
        assert len(p.subsets) == M
        assert sorted(flat.tolist()) == list(range(n))
        assert all(len(s) > 0 for s in p.subsets)
    assert all(len(s) == 1 for s in partition_subsets(n, n).subsets)


def test_partition_out_of_range():
    for M in (0, 9):
        with pytest.raises(InvalidArgument):
            partition_subsets(8, M)
