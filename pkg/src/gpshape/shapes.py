"""Analytic test shapes: exact surface samplers and tessellated meshes.

Used by the test-suite, the acceptance checks and the ``make-shape`` CLI
command. All shapes are centred on the origin.
"""
from __future__ import annotations

import numpy as np

from .dataprep import TriangleMesh
from .geometry import direction_angles


def random_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sample_sphere(n: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    return radius * random_directions(n, rng)


def bumpy_radius(u, amplitude: float = 0.1) -> np.ndarray:
    """Radius of the perturbed sphere along unit direction(s) ``u``."""
    phi, theta = direction_angles(u)
    return 1.0 + amplitude * np.sin(3.0 * phi) * np.cos(2.0 * theta)


def sample_bumpy_sphere(n: int, rng: np.random.Generator, amplitude: float = 0.1) -> np.ndarray:
    u = random_directions(n, rng)
    return bumpy_radius(u, amplitude)[:, None] * u


def sample_cube(n: int, rng: np.random.Generator, half: float = 1.0 / np.sqrt(3.0)) -> np.ndarray:
    """Area-uniform samples on the surface of an axis-aligned cube."""
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [b for b in range(3) if b != a]
        pts[m, a] = sign[m] * half
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def cube_ray_distance(u, half: float = 1.0 / np.sqrt(3.0)) -> np.ndarray:
    """Distance from the origin to the cube surface along direction(s) ``u``."""
    u = np.asarray(u, dtype=np.float64)
    return half / np.abs(u).max(axis=-1)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(radius * np.array(V), np.array(faces))


def bumpy_mesh(subdivisions: int = 4, amplitude: float = 0.1) -> TriangleMesh:
    base = icosphere(subdivisions)
    V = base.vertices * bumpy_radius(base.vertices, amplitude)[:, None]
    return TriangleMesh(V, base.faces)


def cube_mesh(half: float = 1.0 / np.sqrt(3.0), divisions: int = 1) -> TriangleMesh:
    """Closed cube; each face split into ``divisions**2`` quads (two triangles each).

    Face winding is not made consistent; nothing here depends on it.
    """
    verts, faces = [], []
    g = np.linspace(-half, half, divisions + 1)
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        for sign in (1.0, -1.0):
            base = len(verts)
            for i in range(divisions + 1):
                for j in range(divisions + 1):
                    p = np.zeros(3)
                    p[a], p[b], p[c] = sign * half, g[i], g[j]
                    verts.append(p)
            for i in range(divisions):
                for j in range(divisions):
                    v00 = base + i * (divisions + 1) + j
                    v01, v10, v11 = v00 + 1, v00 + divisions + 1, v00 + divisions + 2
                    faces += [(v00, v10, v11), (v00, v11, v01)]
    return TriangleMesh(np.array(verts), np.array(faces))

