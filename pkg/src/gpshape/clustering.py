"""Reference-point selection (k-means or manual) and inter-cluster overlap."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dataprep import SurfacePointCloud
from .errors import DuplicateCenters, InvalidK
from .geometry import as_points

log = logging.getLogger(__name__)

NEAR_SURFACE_WARN = 1e-3


@dataclass(frozen=True)
class ClusterAssignment:
    """Reference points and (possibly overlapping) cluster memberships.

    ``labels`` is the nearest-center partition; ``memberships[k]`` lists the
    sorted indices of training points used for cluster ``k`` and is a superset
    of ``labels == k`` once overlap is applied.
    """

    centers: np.ndarray
    labels: np.ndarray
    memberships: tuple
    q_matrices: np.ndarray
    inertia_history: tuple = field(default=())

    @property
    def k(self) -> int:
        return len(self.centers)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")


def _points(points) -> np.ndarray:
    if isinstance(points, SurfacePointCloud):
        return points.points
    return as_points(points).reshape(-1, 3)


def sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape ``(N, K)``."""
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _partition(labels: np.ndarray, k: int) -> tuple:
    return tuple(np.flatnonzero(labels == j) for j in range(k))


def _kmeans_pp(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, 3))
    centers[0] = pts[rng.integers(len(pts))]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(pts), p=d2 / total)
        else:
            idx = rng.integers(len(pts))
        centers[j] = pts[idx]
        d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))
    return centers


def _warn_near_surface(pts: np.ndarray, centers: np.ndarray) -> None:
    dist, _ = cKDTree(pts).query(centers)
    for j in np.flatnonzero(dist < NEAR_SURFACE_WARN):
        log.warning("reference point %d lies %.2e from the training surface; "
                    "directional distances from it are poorly conditioned", j, dist[j])


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100,
           tol: float = 1e-9) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its current
    center. Returned labels are the nearest-center partition for the returned
    centers, and every ``Q_k`` is the identity.
    """
    pts = _points(points)
    if not isinstance(k, (int, np.integer)) or k < 1 or k > len(pts):
        raise InvalidK(f"k must be in [1, {len(pts)}], got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(pts, k, rng)
    history = []
    for it in range(max_iters):
        d2 = sq_distances(pts, centers)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(pts)), labels].sum()))
        new = centers.copy()
        nearest = d2[np.arange(len(pts)), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = pts[members].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                log.info("k-means: cluster %d empty at iteration %d, re-seeded at point %d", j, it, far)
                new[j] = pts[far]
                nearest[far] = 0.0
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol:
            break
    d2 = sq_distances(pts, centers)
    labels = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(len(pts)), labels].sum()))
    _warn_near_surface(pts, centers)
    return ClusterAssignment(centers, labels, _partition(labels, k),
                             np.repeat(np.eye(3)[None], k, axis=0), tuple(history))


def manual_reference_points(points, centers) -> ClusterAssignment:
    """Nearest-center assignment to user-supplied reference points."""
    pts = _points(points)
    C = as_points(centers).reshape(-1, 3)
    if len(C) == 0:
        raise InvalidK("at least one reference point is required")
    if len(C) > 1:
        pairs = cKDTree(C).query_pairs(1e-12)
        if pairs:
            raise DuplicateCenters(f"duplicate reference points: {sorted(pairs)}")
    d2 = sq_distances(pts, C)
    labels = np.argmin(d2, axis=1)
    _warn_near_surface(pts, C)
    return ClusterAssignment(C.copy(), labels, _partition(labels, len(C)),
                             np.repeat(np.eye(3)[None], len(C), axis=0),
                             (float(d2[np.arange(len(pts)), labels].sum()),))


def apply_overlap(assignment: ClusterAssignment, points, rho: float = 0.15) -> ClusterAssignment:
    """Add each point to every cluster whose center is within ``(1 + rho)`` times
    its nearest-center distance."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho == 0:
        return assignment
    pts = _points(points)
    d = np.sqrt(sq_distances(pts, assignment.centers))
    dn = d[np.arange(len(pts)), assignment.labels]
    within = d <= (1.0 + rho) * dn[:, None]
    within[np.arange(len(pts)), assignment.labels] = True
    members = tuple(np.flatnonzero(within[:, j]) for j in range(assignment.k))
    return ClusterAssignment(assignment.centers, assignment.labels, members,
                             assignment.q_matrices, assignment.inertia_history)
