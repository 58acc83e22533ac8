import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from gpshape.errors import BehindCamera, DegeneratePoint, InvalidTransform
from gpshape.geometry import (CameraIntrinsics, RigidTransform, apply_transform, bearing,
                              direction_angles, from_spherical, project, to_spherical)

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
point = arrays(np.float64, 3, elements=coords)


def random_transform(rng):
    return RigidTransform(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
                          rng.normal(size=3))


def test_pole_is_canonical():
    phi, theta, d = to_spherical([0.0, 0.0, 1.0], np.zeros(3))
    assert (phi, theta, d) == (0.0, 0.0, 1.0)
    phi, theta, _ = to_spherical([0.0, 0.0, -2.0], np.zeros(3))
    assert phi == pytest.approx(np.pi) and theta == 0.0


def test_x_axis():
    phi, theta, d = to_spherical([1.0, 0.0, 0.0], np.zeros(3))
    np.testing.assert_allclose([phi, theta, d], [np.pi / 2, 0.0, 1.0], atol=1e-15)


def test_theta_range_below_x_axis():
    _, theta, _ = to_spherical([1.0, -1e-300, 0.0], np.zeros(3))
    assert 0.0 <= theta < 2 * np.pi


def test_degenerate_point():
    with pytest.raises(DegeneratePoint):
        to_spherical([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


def test_from_spherical_examples():
    np.testing.assert_array_equal(from_spherical(0.0, 1.3, 0.0, [1.0, 2.0, 3.0]), [1, 2, 3])
    np.testing.assert_allclose(from_spherical(np.pi / 2, np.pi / 2, 2.0, np.zeros(3)),
                               [0.0, 2.0, 0.0], atol=1e-15)


def test_round_trip_batch(rng):
    p = rng.normal(size=(1000, 3)) * 3
    c = rng.normal(size=3)
    phi, theta, d = to_spherical(p, c)
    assert np.all((phi >= 0) & (phi <= np.pi)) and np.all((theta >= 0) & (theta < 2 * np.pi))
    np.testing.assert_allclose(from_spherical(phi, theta, d, c), p, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(from_spherical(phi, theta, d, c) - c, axis=1), d,
                               atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(point, point)
def test_round_trip_property(p, c):
    if np.linalg.norm(p - c) < 1e-6:
        return
    phi, theta, d = to_spherical(p, c)
    np.testing.assert_allclose(from_spherical(phi, theta, d, c), p, atol=1e-12 * max(1, d))


def test_bearing_is_unit_and_inverts(rng):
    u = bearing(rng.uniform(0, np.pi, 500), rng.uniform(0, 2 * np.pi, 500))
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-15)
    phi, theta = direction_angles(u)
    np.testing.assert_allclose(bearing(phi, theta), u, atol=1e-14)


def test_apply_transform_examples():
    np.testing.assert_array_equal(apply_transform(RigidTransform.identity(), [1, 2, 3]), [1, 2, 3])
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    np.testing.assert_allclose(apply_transform(RigidTransform(Rz), [1, 0, 0]), [0, 1, 0],
                               atol=1e-15)


def test_inverse_and_associativity(rng):
    A, B, C = (random_transform(rng) for _ in range(3))
    p = rng.normal(size=(50, 3))
    np.testing.assert_allclose((A @ A.inverse()).apply(p), p, atol=1e-10)
    np.testing.assert_allclose(((A @ B) @ C).as_matrix(), (A @ (B @ C)).as_matrix(), atol=1e-12)
    np.testing.assert_allclose((A @ B).apply(p), A.apply(B.apply(p)), atol=1e-12)


def test_preserves_distances(rng):
    T = random_transform(rng)
    p = rng.normal(size=(40, 3))
    q = T.apply(p)
    d0 = np.linalg.norm(p[:, None] - p[None], axis=-1)
    d1 = np.linalg.norm(q[:, None] - q[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-10)


def test_matrix_round_trip(rng):
    T = random_transform(rng)
    T2 = RigidTransform.from_matrix(T.as_matrix())
    np.testing.assert_array_equal(T2.rotation, T.rotation)
    np.testing.assert_array_equal(T2.translation, T.translation)


@pytest.mark.parametrize("R", [np.diag([1.0, 1.0, -1.0]), 2 * np.eye(3),
                               np.array([[1, 1e-6, 0], [0, 1, 0], [0, 0, 1.0]])])
def test_invalid_rotations(R):
    with pytest.raises(InvalidTransform):
        RigidTransform(R)


def test_transform_is_immutable():
    T = RigidTransform.identity()
    with pytest.raises(ValueError):
        T.rotation[0, 0] = 2.0


def test_project_examples():
    K = CameraIntrinsics(500, 500, 320, 320)
    np.testing.assert_allclose(project(K, [0, 0, 1]), [320, 320])
    assert project(K, [1, 0, 1])[0] == pytest.approx(820)
    p = np.array([0.3, -0.2, 1.5])
    a = project(K, p) - 320
    b = project(K, p * [1, 1, 2]) - 320
    np.testing.assert_allclose(b, a / 2, atol=1e-12)


@pytest.mark.parametrize("z", [0.0, -1.0, 1e-10])
def test_project_behind_camera(z):
    with pytest.raises(BehindCamera):
        CameraIntrinsics(500, 500, 320, 320).project([0.1, 0.1, z])


def test_ray_inverts_projection(rng):
    K = CameraIntrinsics(610, 590, 300, 250)
    p = rng.normal(size=(100, 3)) + [0, 0, 5]
    rays = K.ray(K.project(p))
    np.testing.assert_allclose(rays * p[:, 2:], p, atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 500, 0, 0)
