"""Core 3D geometry: spherical distance-direction coordinates, rigid
transforms and the pinhole camera.

Conventions used throughout the package:

* ``phi`` is the polar angle measured from +z, in ``[0, pi]``.
* ``theta`` is the azimuth measured from +x towards +y, in ``[0, 2*pi)``.
  At the poles (``phi`` in ``{0, pi}``) ``theta`` is canonicalised to 0.
* Points are numpy arrays with a trailing axis of length 3; every function
  accepts a single point of shape ``(3,)`` or a batch of shape ``(N, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegeneratePoint, InvalidTransform

TWO_PI = 2.0 * np.pi
MIN_RADIUS = 1e-12
MIN_DEPTH = 1e-9


def as_points(p) -> np.ndarray:
    """Return ``p`` as a float64 array with trailing dimension 3."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ValueError(f"expected trailing dimension 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    return arr


def bearing(phi, theta) -> np.ndarray:
    """Unit bearing vector(s) ``u(phi, theta)``."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    s = np.sin(phi)
    return np.stack([s * np.cos(theta), s * np.sin(theta), np.cos(phi)], axis=-1)


def direction_angles(u) -> tuple[np.ndarray, np.ndarray]:
    """Spherical angles ``(phi, theta)`` of (not necessarily unit) vectors."""
    u = np.asarray(u, dtype=np.float64)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    rho = np.hypot(x, y)
    phi = np.arctan2(rho, z)
    theta = np.mod(np.arctan2(y, x), TWO_PI)
    # mod can round a tiny negative angle up to exactly 2*pi
    theta = np.where((rho == 0.0) | (theta >= TWO_PI), 0.0, theta)
    return phi, theta


def to_spherical(p, center) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parameterise point(s) ``p`` relative to ``center``.

    Returns
    -------
    phi, theta, d : ndarray
        Polar angle, azimuth and distance, each with the batch shape of ``p``.

    Raises
    ------
    DegeneratePoint
        If any point coincides with the center (direction undefined).
    """
    r = as_points(p) - as_points(center)
    d = np.linalg.norm(r, axis=-1)
    if np.any(d < MIN_RADIUS):
        raise DegeneratePoint("point coincides with the reference point; direction undefined")
    phi, theta = direction_angles(r)
    return phi, theta, d


def from_spherical(phi, theta, d, center) -> np.ndarray:
    """Inverse of :func:`to_spherical`: ``P = d * u(phi, theta) + C``."""
    d = np.asarray(d, dtype=np.float64)
    return d[..., None] * bearing(phi, theta) + as_points(center)


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidTransform("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol:
        raise InvalidTransform("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidTransform("rotation determinant is not +1")


@dataclass(frozen=True)
class RigidTransform:
    """An element of SE(3) acting as ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(R)
        if not np.all(np.isfinite(t)):
            raise InvalidTransform("translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, p) -> np.ndarray:
        return as_points(p) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)


def apply_transform(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, p_cam) -> np.ndarray:
        """Project camera-frame point(s) to pixel coordinates ``(u, v)``."""
        p = as_points(p_cam)
        z = p[..., 2]
        if np.any(z <= MIN_DEPTH):
            raise BehindCamera("point at or behind the camera plane")
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def ray(self, pixels) -> np.ndarray:
        """Camera-frame ray directions with unit depth (``z = 1``) through pixels."""
        px = np.asarray(pixels, dtype=np.float64)
        x = (px[..., 0] - self.cx) / self.fx
        y = (px[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


def project(K: CameraIntrinsics, p_cam) -> np.ndarray:
    return K.project(p_cam)
