"""Data preparation: unit-sphere normalisation, Fibonacci camera grids,
ray-cast surface sampling and disjoint train/test subsampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateExtent, EmptyCloud, InsufficientPoints, NoHits
from .geometry import as_points

log = logging.getLogger(__name__)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
CAMERA_RADIUS = 2.0


@dataclass(frozen=True)
class SurfacePointCloud:
    """Points plus the normalisation that produced them.

    ``points == (original - center) * scale``; a raw cloud has
    ``center = 0`` and ``scale = 1``.
    """

    points: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        pts = as_points(self.points).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "center", as_points(self.center).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def __len__(self):
        return len(self.points)

    def to_original(self, pts=None) -> np.ndarray:
        pts = self.points if pts is None else as_points(pts)
        return pts / self.scale + self.center

    def to_normalized(self, original) -> np.ndarray:
        return (as_points(original) - self.center) * self.scale

    def with_points(self, pts) -> "SurfacePointCloud":
        return SurfacePointCloud(pts, self.center, self.scale)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        V = as_points(self.vertices).reshape(-1, 3)
        F = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(F) and (F.min() < 0 or F.max() >= len(V)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)
        object.__setattr__(self, "center", as_points(self.center).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def triangles(self, usable_only: bool = True) -> np.ndarray:
        tri = self.vertices[self.faces]
        if usable_only:
            tri = tri[self.face_areas() > 0.0]
        return tri

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def _bbox_normalization(pts: np.ndarray) -> tuple[np.ndarray, float]:
    if len(pts) == 0:
        raise EmptyCloud("cannot normalise an empty point set")
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    radius = np.linalg.norm(pts - center, axis=1).max()
    if not radius > 1e-12:
        raise DegenerateExtent("point set has zero extent; scale undefined")
    return center, 1.0 / radius


def normalize_unit_sphere(cloud: SurfacePointCloud) -> SurfacePointCloud:
    """Center at the bounding-box center and scale so the farthest point has norm 1.

    The returned cloud records the composite normalisation, so
    :meth:`SurfacePointCloud.to_original` maps back to the source units.
    """
    c, s = _bbox_normalization(cloud.points)
    pts = (cloud.points - c) * s
    # compose with any normalisation already carried by the input
    return SurfacePointCloud(pts, cloud.center + c / cloud.scale, cloud.scale * s)


def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    c, s = _bbox_normalization(mesh.vertices)
    return TriangleMesh((mesh.vertices - c) * s, mesh.faces,
                        mesh.center + c / mesh.scale, mesh.scale * s)


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` unit vectors on the golden-angle spiral lattice, shape ``(n, 3)``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / max(n, 1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    a = GOLDEN_ANGLE * i
    u = np.stack([r * np.cos(a), r * np.sin(a), z], axis=1)
    return u / np.linalg.norm(u, axis=1, keepdims=True) if n else u


def cone_directions(axis, half_angle: float, n: int) -> np.ndarray:
    """``n`` spiral-lattice unit vectors inside the cone around ``axis``."""
    w = np.asarray(axis, dtype=np.float64)
    w = w / np.linalg.norm(w)
    helper = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(w, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(w, e1)
    i = np.arange(n, dtype=np.float64)
    cos_t = 1.0 - (1.0 - np.cos(half_angle)) * (i + 0.5) / max(n, 1)
    sin_t = np.sqrt(np.clip(1.0 - cos_t ** 2, 0.0, None))
    a = GOLDEN_ANGLE * i
    d = (sin_t * np.cos(a))[:, None] * e1 + (sin_t * np.sin(a))[:, None] * e2 + cos_t[:, None] * w
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Bounding volume hierarchy + Moller-Trumbore ray casting

@dataclass(frozen=True)
class _BVH:
    lo: np.ndarray      # (M, 3) node box minimum
    hi: np.ndarray      # (M, 3) node box maximum
    left: np.ndarray    # (M,) left child, -1 for leaves
    right: np.ndarray   # (M,) right child
    start: np.ndarray   # (M,) first index into order (leaves)
    count: np.ndarray   # (M,) triangle count (leaves)
    order: np.ndarray   # triangle permutation


def _build_bvh(tri: np.ndarray, leaf_size: int = 4) -> _BVH:
    cent = tri.mean(axis=1)
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    order = np.arange(len(tri))
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        lo.append(tlo[idx].min(axis=0))
        hi.append(thi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(lo) - 1

    root = new_node(0, len(tri))
    stack = [(root, 0, len(tri))]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        c = cent[order[s:e]]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (e - s) // 2
        part = np.argpartition(c[:, axis], mid)
        order[s:e] = order[s:e][part]
        m = s + mid
        l_node = new_node(s, m)
        r_node = new_node(m, e)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((l_node, s, m))
        stack.append((r_node, m, e))
    return _BVH(np.array(lo), np.array(hi), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
                np.array(count, dtype=np.int64), order.astype(np.int64))


@numba.njit(cache=True)
def _slab(o, inv, lo, hi, tmax):
    t0 = 0.0
    t1 = tmax
    for a in range(3):
        ta = (lo[a] - o[a]) * inv[a]
        tb = (hi[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _moller_trumbore(o, d, v0, v1, v2):
    e1x, e1y, e1z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
    e2x, e2y, e2z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    scale = np.sqrt((e1x * e1x + e1y * e1y + e1z * e1z) * (e2x * e2x + e2y * e2y + e2z * e2z))
    if abs(det) <= 1e-12 * scale:
        return -1.0
    inv = 1.0 / det
    tx, ty, tz = o[0] - v0[0], o[1] - v0[1], o[2] - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@numba.njit(cache=True)
def _trace(origins, dirs, tri, lo, hi, left, right, start, count, order, t_min):
    n = origins.shape[0]
    t_hit = np.full(n, np.inf)
    f_hit = np.full(n, -1, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    inv = np.empty(3)
    for r in range(n):
        o = origins[r]
        d = dirs[r]
        for a in range(3):
            inv[a] = 1.0 / d[a] if d[a] != 0.0 else 1e300
        best = np.inf
        best_f = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _slab(o, inv, lo[node], hi[node], best):
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    f = order[k]
                    t = _moller_trumbore(o, d, tri[f, 0], tri[f, 1], tri[f, 2])
                    if t > t_min and t < best:
                        best = t
                        best_f = f
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        t_hit[r] = best
        f_hit[r] = best_f
    return t_hit, f_hit


def cast_rays(mesh: TriangleMesh, origins, directions, t_min: float = 1e-12):
    """First intersection of each ray with the mesh.

    Returns
    -------
    t : ndarray (R,)
        Ray parameter of the first hit, ``inf`` on a miss.
    face : ndarray (R,)
        Index into ``mesh.faces`` of the hit triangle, ``-1`` on a miss.
    """
    areas = mesh.face_areas()
    usable = np.flatnonzero(areas > 0.0)
    tri = np.ascontiguousarray(mesh.vertices[mesh.faces[usable]])
    O = np.ascontiguousarray(np.broadcast_to(as_points(origins), np.shape(directions)), dtype=np.float64)
    D = np.ascontiguousarray(directions, dtype=np.float64)
    if len(tri) == 0 or len(D) == 0:
        return np.full(len(D), np.inf), np.full(len(D), -1, dtype=np.int64)
    bvh = _build_bvh(tri)
    t, f = _trace(O, D, tri, bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start,
                  bvh.count, bvh.order, t_min)
    f = np.where(f >= 0, usable[np.maximum(f, 0)], -1)
    return t, f


def camera_rays(camera_dirs, rays_per_camera: int, aperture_deg: float = 60.0):
    """Ray origins/directions for look-at-origin cameras at radius 2."""
    cams = np.asarray(camera_dirs, dtype=np.float64).reshape(-1, 3)
    cams = cams / np.linalg.norm(cams, axis=1, keepdims=True)
    half = np.deg2rad(aperture_deg) / 2.0
    origins, dirs = [], []
    for c in cams:
        d = cone_directions(-c, half, rays_per_camera)
        origins.append(np.broadcast_to(CAMERA_RADIUS * c, d.shape))
        dirs.append(d)
    if not dirs:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(origins), np.concatenate(dirs)


def dedup_points(pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Drop points within ``tol`` of an earlier point (order preserved)."""
    if len(pts) < 2:
        return pts
    pairs = cKDTree(pts).query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return pts
    drop = np.zeros(len(pts), dtype=bool)
    drop[pairs.max(axis=1)] = True
    return pts[~drop]


def raycast_sample(mesh: TriangleMesh, camera_dirs, rays_per_camera: int,
                   aperture_deg: float = 60.0) -> SurfacePointCloud:
    """Dense surface samples: first hits of camera ray fans on a normalised mesh."""
    O, D = camera_rays(camera_dirs, rays_per_camera, aperture_deg)
    t, _ = cast_rays(mesh, O, D)
    hit = np.isfinite(t)
    if not hit.any():
        raise NoHits("no camera ray intersected the mesh")
    pts = O[hit] + t[hit, None] * D[hit]
    pts = dedup_points(pts)
    log.debug("ray casting: %d rays, %d hits, %d unique", len(D), int(hit.sum()), len(pts))
    return SurfacePointCloud(pts, mesh.center, mesh.scale)


def split_train_test(cloud: SurfacePointCloud, n_train: int = 10000, n_test: int = 30000,
                     seed: int = 0) -> tuple[SurfacePointCloud, SurfacePointCloud]:
    """Disjoint uniform-random subsamples of sizes ``n_train`` and ``n_test``."""
    if n_train < 0 or n_test < 0:
        raise ValueError("sample sizes must be non-negative")
    if len(cloud) < n_train + n_test:
        raise InsufficientPoints(
            f"need {n_train + n_test} points for the split, cloud has {len(cloud)}")
    perm = np.random.default_rng(seed).permutation(len(cloud))
    tr = np.sort(perm[:n_train])
    te = np.sort(perm[n_train:n_train + n_test])
    return cloud.with_points(cloud.points[tr]), cloud.with_points(cloud.points[te])
