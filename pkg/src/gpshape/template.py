"""Shape templates: a mixture of per-cluster directional distance GPs.

Each cluster ``k`` has a reference point ``C_k`` and a GP predicting the
distance from ``C_k`` to the surface along a direction. A template answers
three kinds of query:

* likelihoods of 3D points (Gaussian density of the radial residual, with a
  variance calibrated on held-out data),
* softmax mixture weights over reference points,
* surface reconstruction (nearest-center ownership).
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import gp
from .clustering import ClusterAssignment, apply_overlap, kmeans, manual_reference_points, sq_distances
from .dataprep import SurfacePointCloud, fibonacci_directions
from .errors import ClusterTooSmall, CorruptTemplate, DegeneratePoint, SchemaVersionMismatch
from .geometry import MIN_RADIUS, RigidTransform, as_points, bearing, direction_angles, to_spherical

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SIGMA2_FLOOR = 1e-12
MIN_CLUSTER_POINTS = 4
SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ShapeTemplate:
    assignment: ClusterAssignment
    models: tuple
    calibrated_sigma2: np.ndarray
    center: np.ndarray
    scale: float
    format_version: int = FORMAT_VERSION

    @property
    def centers(self) -> np.ndarray:
        return self.assignment.centers

    @property
    def k(self) -> int:
        return len(self.models)

    @property
    def calibrated_sigma(self) -> np.ndarray:
        return np.sqrt(self.calibrated_sigma2)

    @property
    def training_share(self) -> np.ndarray:
        n = np.array([len(m) for m in self.models], dtype=np.float64)
        return n / n.sum()


@dataclass(frozen=True)
class LikelihoodQuery:
    point: np.ndarray
    weights: np.ndarray      # softmax pi_k
    densities: np.ndarray    # calibrated normal density per cluster
    means: np.ndarray        # predicted distance per cluster
    distances: np.ndarray    # actual distance to each reference point
    best_cluster: int
    max_density: float
    mixture: float           # sum_k pi_k * density_k

    @property
    def residuals(self) -> np.ndarray:
        return self.distances - self.means


def _cluster_data(points: np.ndarray, center: np.ndarray):
    phi, theta, d = to_spherical(points, center)
    return np.stack([phi, theta], axis=1), d


def _fit_cluster(args):
    psi, d, kernel, opt = args
    return gp.fit(psi, d, kernel, opt)


def build_template(train: SurfacePointCloud, test: SurfacePointCloud, k: int = 1,
                   kernel: gp.KernelConfig | None = None, rho: float = 0.15, seed: int = 0,
                   opt: gp.OptimizerConfig | None = None, centers=None,
                   threads: int = 1) -> ShapeTemplate:
    """Cluster, fit one GP per cluster and calibrate variances on ``test``.

    ``centers`` switches from k-means to user-supplied reference points.
    """
    kernel = kernel or gp.KernelConfig()
    if centers is None:
        assignment = kmeans(train, k, seed=seed)
    else:
        assignment = manual_reference_points(train, centers)
    assignment = apply_overlap(assignment, train, rho)

    jobs = []
    for j, members in enumerate(assignment.memberships):
        if len(members) < MIN_CLUSTER_POINTS:
            raise ClusterTooSmall(
                f"cluster {j} has {len(members)} training points; need {MIN_CLUSTER_POINTS}")
        pts = train.points[members]
        keep = np.linalg.norm(pts - assignment.centers[j], axis=1) >= MIN_RADIUS
        psi, d = _cluster_data(pts[keep], assignment.centers[j])
        jobs.append((psi, d, kernel, opt))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = tuple(pool.map(_fit_cluster, jobs))
    else:
        models = tuple(_fit_cluster(job) for job in jobs)
    for j, m in enumerate(models):
        log.info("cluster %d: n=%d nmll=%.6g lengthscale=%.4g noise=%.3g", j, len(m), m.nmll,
                 m.kernel.lengthscale, m.kernel.noise)

    provisional = ShapeTemplate(assignment, models, np.ones(len(models)), train.center, train.scale)
    sigma2 = calibrate_variance(provisional, test)
    return ShapeTemplate(assignment, models, sigma2, train.center, train.scale)


def nearest_center(centers: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return np.argmin(sq_distances(pts, centers), axis=1)


def heldout_residuals(template: ShapeTemplate, test) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-center label and ``predicted - true`` distance for each test point.

    Points coinciding with their reference point are dropped (label -1).
    """
    pts = test.points if isinstance(test, SurfacePointCloud) else as_points(test).reshape(-1, 3)
    labels = nearest_center(template.centers, pts)
    resid = np.full(len(pts), np.nan)
    for j in range(template.k):
        idx = np.flatnonzero(labels == j)
        if len(idx) == 0:
            continue
        r = pts[idx] - template.centers[j]
        dist = np.linalg.norm(r, axis=1)
        ok = dist >= MIN_RADIUS
        phi, theta = direction_angles(r[ok])
        mu = gp.predict_mean(template.models[j], np.stack([phi, theta], axis=1))
        resid[idx[ok]] = mu - dist[ok]
        labels[idx[~ok]] = -1
    return labels, resid


def calibrate_variance(template: ShapeTemplate, test) -> np.ndarray:
    """Per-cluster mean squared prediction error on held-out points.

    Clusters that receive no test point fall back to the global mean squared
    deviation. Values are floored at ``1e-12``.
    """
    labels, resid = heldout_residuals(template, test)
    valid = labels >= 0
    if not valid.any():
        raise ValueError("calibration needs at least one usable test point")
    global_msd = float(np.mean(resid[valid] ** 2))
    out = np.empty(template.k)
    for j in range(template.k):
        r = resid[labels == j]
        if len(r) == 0:
            log.warning("cluster %d received no test points; using global mean squared deviation", j)
            out[j] = global_msd
        else:
            out[j] = float(np.mean(r ** 2))
    return np.maximum(out, SIGMA2_FLOOR)


def mixture_weights(template: ShapeTemplate, p) -> np.ndarray:
    """Softmax weights ``pi_k ∝ exp(-(p - C_k)^T Q_k (p - C_k))``."""
    pts = as_points(p)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    diff = pts[:, None, :] - template.centers[None, :, :]
    logits = -np.einsum("nki,kij,nkj->nk", diff, template.assignment.q_matrices, diff)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


def normal_density(x, mean, sigma2) -> np.ndarray:
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    return np.exp(-0.5 * (np.asarray(x) - mean) ** 2 / sigma2) / (SQRT_2PI * np.sqrt(sigma2))


def cluster_predictions(template: ShapeTemplate, pts) -> tuple[np.ndarray, np.ndarray]:
    """Predicted and actual distances of each point w.r.t. each reference point.

    Returns arrays of shape ``(N, K)``: ``(means, distances)``.
    """
    pts = as_points(pts).reshape(-1, 3)
    means = np.empty((len(pts), template.k))
    dists = np.empty_like(means)
    for j, (c, model) in enumerate(zip(template.centers, template.models)):
        r = pts - c
        dist = np.linalg.norm(r, axis=1)
        if np.any(dist < MIN_RADIUS):
            raise DegeneratePoint(f"query point coincides with reference point {j}")
        phi, theta = direction_angles(r)
        means[:, j] = gp.predict_mean(model, np.stack([phi, theta], axis=1))
        dists[:, j] = dist
    return means, dists


def likelihood_table(template: ShapeTemplate, pts) -> dict:
    """Vectorised likelihood evaluation for many points.

    Returns a dict of ``(N, K)`` arrays ``means``, ``distances``,
    ``densities``, ``weights`` and ``(N,)`` arrays ``best_cluster``,
    ``max_density``, ``mixture``.
    """
    means, dists = cluster_predictions(template, pts)
    dens = normal_density(dists, means, template.calibrated_sigma2[None, :])
    w = mixture_weights(template, as_points(pts).reshape(-1, 3))
    best = np.argmax(dens, axis=1)
    return {
        "means": means,
        "distances": dists,
        "densities": dens,
        "weights": w,
        "best_cluster": best,
        "max_density": dens[np.arange(len(dens)), best],
        "mixture": np.sum(w * dens, axis=1),
    }


def point_likelihood(template: ShapeTemplate, p) -> LikelihoodQuery:
    """Per-cluster densities, weights, mixture value and max density of one point."""
    p = as_points(p).reshape(3)
    t = likelihood_table(template, p[None])
    return LikelihoodQuery(p, t["weights"][0], t["densities"][0], t["means"][0],
                           t["distances"][0], int(t["best_cluster"][0]),
                           float(t["max_density"][0]), float(t["mixture"][0]))


def reconstruct(template: ShapeTemplate, directions_per_cluster: int) -> SurfacePointCloud:
    """Surface points along a Fibonacci grid of directions from each reference point.

    A point is kept only if no other reference point is strictly nearer to it
    than the one that generated it.
    """
    out = []
    u = fibonacci_directions(directions_per_cluster)
    if len(u):
        phi, theta = direction_angles(u)
        psi = np.stack([phi, theta], axis=1)
        for j, (c, model) in enumerate(zip(template.centers, template.models)):
            mu = gp.predict_mean(model, psi)
            pts = c + mu[:, None] * u
            d2 = sq_distances(pts, template.centers)
            own = d2[:, j] <= d2.min(axis=1)
            out.append(pts[own & (mu > 0)])
    pts = np.concatenate(out) if out else np.zeros((0, 3))
    return SurfacePointCloud(pts, template.center, template.scale)


def reconstruct_at(template: ShapeTemplate, queries) -> SurfacePointCloud:
    """Reconstruct one surface point per query along the ray from its nearest
    reference point."""
    q = queries.points if isinstance(queries, SurfacePointCloud) else as_points(queries).reshape(-1, 3)
    labels = nearest_center(template.centers, q)
    out = np.empty_like(q)
    for j in range(template.k):
        idx = np.flatnonzero(labels == j)
        if len(idx) == 0:
            continue
        r = q[idx] - template.centers[j]
        if np.any(np.linalg.norm(r, axis=1) < MIN_RADIUS):
            raise DegeneratePoint("query point coincides with a reference point")
        phi, theta = direction_angles(r)
        mu = gp.predict_mean(template.models[j], np.stack([phi, theta], axis=1))
        out[idx] = template.centers[j] + mu[:, None] * bearing(phi, theta)
    return SurfacePointCloud(out, template.center, template.scale)


def transformed(template: ShapeTemplate, T: RigidTransform) -> ShapeTemplate:
    """The same template expressed in a frame moved by ``T``.

    Training directions are rotated and each GP is re-conditioned at its
    learned hyperparameters; calibrated variances carry over unchanged.
    """
    R = T.rotation
    centers = T.apply(template.centers)
    q = np.einsum("ij,kjl,ml->kim", R, template.assignment.q_matrices, R)
    models = []
    for m in template.models:
        u = bearing(m.train_psi[:, 0], m.train_psi[:, 1]) @ R.T
        phi, theta = direction_angles(u)
        models.append(gp.condition(np.stack([phi, theta], axis=1), m.train_d, m.kernel))
    a = template.assignment
    assignment = ClusterAssignment(centers, a.labels, a.memberships, q, a.inertia_history)
    return ShapeTemplate(assignment, tuple(models), template.calibrated_sigma2.copy(),
                         template.center, template.scale, template.format_version)


# ---------------------------------------------------------------------------
# persistence

def _dump_json(obj, fh, indent: int = 0, level: int = 0) -> None:
    """JSON writer that prints every float with 17 significant digits."""
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    if isinstance(obj, dict):
        fh.write("{")
        for i, (k, v) in enumerate(obj.items()):
            fh.write(("," if i else "") + pad + json.dumps(str(k)) + ": ")
            _dump_json(v, fh, indent, level + 1)
        fh.write((end if obj else "") + "}")
    elif isinstance(obj, (list, tuple)):
        # numeric leaf arrays are written on one line
        flat = all(not isinstance(x, (dict, list, tuple)) for x in obj)
        fh.write("[")
        for i, v in enumerate(obj):
            fh.write(("," if i else "") + ("" if flat else pad))
            _dump_json(v, fh, indent, level + 1)
        fh.write(("" if flat or not obj else end) + "]")
    elif isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        fh.write(json.dumps(obj if not isinstance(obj, np.bool_) else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        fh.write(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("non-finite number in template")
        fh.write("%.17g" % x)
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def template_to_dict(template: ShapeTemplate) -> dict:
    clusters = []
    for c, q, m, s2 in zip(template.centers, template.assignment.q_matrices, template.models,
                           template.calibrated_sigma2):
        clusters.append({
            "center": c.tolist(),
            "q_matrix": q.reshape(9).tolist(),
            "kernel": m.kernel.to_dict(),
            "nmll": m.nmll,
            "train_psi": m.train_psi.tolist(),
            "train_d": m.train_d.tolist(),
            "calibrated_sigma2": float(s2),
        })
    return {
        "format_version": template.format_version,
        "normalization": {"center": template.center.tolist(), "scale": template.scale},
        "clusters": clusters,
    }


def dumps(template: ShapeTemplate) -> str:
    import io
    buf = io.StringIO()
    _dump_json(template_to_dict(template), buf, indent=1)
    buf.write("\n")
    return buf.getvalue()


def save(template: ShapeTemplate, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps(template))
    os.replace(tmp, path)


def template_from_dict(doc: dict) -> ShapeTemplate:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptTemplate("missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise SchemaVersionMismatch(
            f"template format_version {doc['format_version']!r}, expected {FORMAT_VERSION}")
    try:
        norm = doc["normalization"]
        centers, qs, models, sigma2 = [], [], [], []
        for c in doc["clusters"]:
            centers.append(np.asarray(c["center"], dtype=np.float64).reshape(3))
            qs.append(np.asarray(c["q_matrix"], dtype=np.float64).reshape(3, 3))
            kern = gp.KernelConfig.from_dict(c["kernel"])
            models.append(gp.condition(np.asarray(c["train_psi"], dtype=np.float64).reshape(-1, 2),
                                       np.asarray(c["train_d"], dtype=np.float64), kern,
                                       nmll_value=c.get("nmll")))
            sigma2.append(float(c["calibrated_sigma2"]))
        if not centers:
            raise CorruptTemplate("template has no clusters")
        sigma2 = np.asarray(sigma2)
        if not np.all(np.isfinite(sigma2)) or np.any(sigma2 <= 0):
            raise CorruptTemplate("calibrated variances must be finite and positive")
        C = np.asarray(centers)
        labels = np.zeros(0, dtype=np.int64)
        assignment = ClusterAssignment(C, labels, tuple(np.zeros(0, dtype=np.int64) for _ in C),
                                       np.asarray(qs))
        return ShapeTemplate(assignment, tuple(models), sigma2,
                             np.asarray(norm["center"], dtype=np.float64).reshape(3),
                             float(norm["scale"]))
    except CorruptTemplate:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptTemplate(f"malformed template: {exc}") from exc


def loads(text: str) -> ShapeTemplate:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptTemplate(f"template is not valid JSON: {exc}") from exc
    return template_from_dict(doc)


def load(path) -> ShapeTemplate:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
