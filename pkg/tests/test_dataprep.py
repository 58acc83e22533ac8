import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpshape import dataprep, shapes
from gpshape.dataprep import SurfacePointCloud
from gpshape.errors import DegenerateExtent, EmptyCloud, InsufficientPoints, NoHits


def test_normalize_cube_corners():
    corners = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).reshape(3, -1).T * 1.0
    out = dataprep.normalize_unit_sphere(SurfacePointCloud(corners))
    np.testing.assert_allclose(np.linalg.norm(out.points, axis=1), 1.0, atol=1e-15)
    np.testing.assert_array_equal(out.center, 0.0)
    assert out.scale == pytest.approx(1 / np.sqrt(3))


def test_normalize_round_trip_and_idempotent(rng):
    pts = rng.normal(size=(200, 3)) * [3, 1, 0.5] + [10, -4, 2]
    out = dataprep.normalize_unit_sphere(SurfacePointCloud(pts))
    assert np.linalg.norm(out.points, axis=1).max() == pytest.approx(1.0)
    np.testing.assert_allclose(out.to_original(), pts, atol=1e-10)
    lo, hi = out.points.min(axis=0), out.points.max(axis=0)
    np.testing.assert_allclose((lo + hi) / 2, 0.0, atol=1e-12)
    again = dataprep.normalize_unit_sphere(out)
    np.testing.assert_allclose(again.points, out.points, atol=1e-10)
    np.testing.assert_allclose(again.to_original(), pts, atol=1e-10)


def test_normalize_errors():
    with pytest.raises(DegenerateExtent):
        dataprep.normalize_unit_sphere(SurfacePointCloud(np.ones((5, 3))))
    with pytest.raises(EmptyCloud):
        dataprep.normalize_unit_sphere(SurfacePointCloud(np.zeros((0, 3))))


def test_normalize_mesh_records_transform():
    mesh = shapes.icosphere(1, radius=3.0)
    m = dataprep.TriangleMesh(mesh.vertices + 5.0, mesh.faces)
    n = dataprep.normalize_mesh(m)
    np.testing.assert_allclose(np.linalg.norm(n.vertices, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(n.vertices / n.scale + n.center, m.vertices, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 100, 777])
def test_fibonacci_unit_norm(n):
    u = dataprep.fibonacci_directions(n)
    assert u.shape == (n, 3)
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)


def test_fibonacci_separation():
    n = 500
    u = dataprep.fibonacci_directions(n)
    cos = np.clip(u @ u.T, -1, 1)
    np.fill_diagonal(cos, -1)
    min_angle = np.arccos(cos.max())
    assert min_angle > 0.5 * np.sqrt(4 * np.pi / n)


def test_fibonacci_is_balanced():
    u = dataprep.fibonacci_directions(2000)
    np.testing.assert_allclose(u.mean(axis=0), 0.0, atol=2e-3)


def _point_triangle_plane_distance(p, tri):
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return np.abs(np.einsum("ij,ij->i", p - tri[:, 0], n))


def test_cast_rays_against_brute_force(rng):
    mesh = shapes.icosphere(1)
    O = rng.normal(size=(300, 3)) * 2
    D = rng.normal(size=(300, 3))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    t, f = dataprep.cast_rays(mesh, O, D)
    tri = mesh.triangles()
    # brute force Moller-Trumbore over every triangle
    for i in range(len(O)):
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        h = np.cross(D[i], e2)
        a = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(a) > 1e-15
        s = O[i] - tri[:, 0]
        u = np.einsum("ij,ij->i", s, h) / np.where(ok, a, 1)
        q = np.cross(s, e1)
        v = (q @ D[i]) / np.where(ok, a, 1)
        tt = np.einsum("ij,ij->i", e2, q) / np.where(ok, a, 1)
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (tt > 1e-12)
        expected = tt[hit].min() if hit.any() else np.inf
        if np.isfinite(expected):
            assert t[i] == pytest.approx(expected, abs=1e-12)
        else:
            assert not np.isfinite(t[i]) and f[i] == -1


def test_raycast_sphere_hits_on_surface():
    mesh = shapes.icosphere(3)
    cloud = dataprep.raycast_sample(mesh, dataprep.fibonacci_directions(20), 100)
    r = np.linalg.norm(cloud.points, axis=1)
    assert np.all(r <= 1 + 1e-12)
    assert np.all(r > 0.98)  # tessellation sag of a level-3 icosphere
    O, D = dataprep.camera_rays(dataprep.fibonacci_directions(20), 100)
    t, f = dataprep.cast_rays(mesh, O, D)
    hit = np.isfinite(t)
    P = O[hit] + t[hit, None] * D[hit]
    assert _point_triangle_plane_distance(P, mesh.vertices[mesh.faces[f[hit]]]).max() < 1e-9


def test_raycast_first_hit_only():
    # every ray that enters the closed sphere also exits; only the near side is kept
    mesh = shapes.icosphere(2)
    cams = dataprep.fibonacci_directions(12)
    cloud = dataprep.raycast_sample(mesh, cams, 50)
    O, D = dataprep.camera_rays(cams, 50)
    t, _ = dataprep.cast_rays(mesh, O, D)
    assert len(cloud) <= np.isfinite(t).sum()
    P = O[np.isfinite(t)] + t[np.isfinite(t), None] * D[np.isfinite(t)]
    cam = O[np.isfinite(t)]
    # first hits face the camera: the hit lies on the camera's hemisphere
    assert np.all(np.einsum("ij,ij->i", P, cam) > 0)


def test_raycast_cube_on_faces():
    mesh = shapes.cube_mesh(divisions=3)
    half = 1 / np.sqrt(3)
    cloud = dataprep.raycast_sample(mesh, dataprep.fibonacci_directions(30), 80)
    sdf = np.abs(cloud.points).max(axis=1) - half
    assert np.abs(sdf).max() < 1e-9


def test_raycast_miss():
    tiny = dataprep.TriangleMesh(np.array([[5, 5, 5], [5.1, 5, 5], [5, 5.1, 5.0]]), [[0, 1, 2]])
    with pytest.raises(NoHits):
        dataprep.raycast_sample(tiny, [[0, 0, 1.0]], 10)


def test_ray_through_empty_space():
    mesh = shapes.icosphere(1)
    t, f = dataprep.cast_rays(mesh, np.array([[0, 0, 3.0]]), np.array([[0, 0, 1.0]]))
    assert np.isinf(t[0]) and f[0] == -1


def test_degenerate_faces_are_ignored():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0.0]])
    mesh = dataprep.TriangleMesh(V, [[0, 1, 3], [0, 1, 2]])
    t, f = dataprep.cast_rays(mesh, np.array([[0.2, 0.2, 1.0]]), np.array([[0, 0, -1.0]]))
    assert t[0] == pytest.approx(1.0) and f[0] == 1


def test_dedup():
    pts = np.array([[0, 0, 0], [0, 0, 1e-12], [1, 0, 0], [1, 0, 0.0]])
    np.testing.assert_array_equal(dataprep.dedup_points(pts), [[0, 0, 0], [1, 0, 0]])


def test_split_small_example():
    cloud = SurfacePointCloud(np.arange(30.0).reshape(10, 3))
    tr, te = dataprep.split_train_test(cloud, 2, 3, seed=1)
    assert len(tr) == 2 and len(te) == 3
    a = {tuple(p) for p in tr.points}
    b = {tuple(p) for p in te.points}
    assert not a & b
    tr2, te2 = dataprep.split_train_test(cloud, 2, 3, seed=1)
    np.testing.assert_array_equal(tr.points, tr2.points)
    np.testing.assert_array_equal(te.points, te2.points)


def test_split_insufficient():
    with pytest.raises(InsufficientPoints):
        dataprep.split_train_test(SurfacePointCloud(np.zeros((4, 3))), 3, 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 40), st.integers(0, 40))
def test_split_disjoint_property(seed, n_train, n_test):
    cloud = SurfacePointCloud(np.arange(300.0).reshape(100, 3))
    tr, te = dataprep.split_train_test(cloud, n_train, n_test, seed=seed)
    assert not set(tr.points[:, 0]) & set(te.points[:, 0])
    assert len(tr) == n_train and len(te) == n_test


def test_split_keeps_normalization():
    cloud = SurfacePointCloud(np.random.default_rng(0).normal(size=(20, 3)), [1, 2, 3], 0.5)
    tr, te = dataprep.split_train_test(cloud, 5, 5)
    np.testing.assert_array_equal(tr.center, [1, 2, 3])
    assert te.scale == 0.5
