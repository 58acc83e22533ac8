"""Shape and pose quality metrics."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .dataprep import SurfacePointCloud
from .errors import ConfigError, DegenerateVariance, EmptyCloud, LengthMismatch
from .geometry import RigidTransform, as_points

CHAMFER_SAMPLES = 30000


@dataclass(frozen=True)
class ShapeMetrics:
    chamfer: float
    precision: float
    recall: float
    fscore: float
    tau: float
    n_gt: int
    n_est: int

    def to_dict(self) -> dict:
        return asdict(self)


def _cloud(x, name: str) -> np.ndarray:
    pts = x.points if isinstance(x, SurfacePointCloud) else as_points(x).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud(f"{name} point cloud is empty")
    return pts


def subsample(pts: np.ndarray, max_points: int | None, seed: int = 0) -> np.ndarray:
    """At most ``max_points`` rows drawn without replacement (order kept)."""
    if max_points is None or len(pts) <= max_points:
        return pts
    rng = np.random.default_rng(seed)
    return pts[np.sort(rng.choice(len(pts), size=max_points, replace=False))]


def _nn_dist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` point to its nearest ``dst`` point."""
    return cKDTree(dst).query(src, k=1)[0]


def chamfer(gt, est, max_points: int | None = CHAMFER_SAMPLES, seed: int = 0) -> float:
    """Symmetric Chamfer distance with squared nearest-neighbour distances.

    ``mean_gt min_est |x - y|^2 + mean_est min_gt |x - y|^2``. Clouds larger
    than ``max_points`` are randomly subsampled first.
    """
    a = subsample(_cloud(gt, "ground-truth"), max_points, seed)
    b = subsample(_cloud(est, "estimated"), max_points, seed + 1)
    return float(np.mean(_nn_dist(a, b) ** 2) + np.mean(_nn_dist(b, a) ** 2))


def precision_recall_f(gt, est, tau: float = 0.01, max_points: int | None = CHAMFER_SAMPLES,
                       seed: int = 0) -> ShapeMetrics:
    """Precision, recall and F-score at distance threshold ``tau`` (strict ``<``).

    The Chamfer distance of the same (subsampled) clouds is included.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    a = subsample(_cloud(gt, "ground-truth"), max_points, seed)
    b = subsample(_cloud(est, "estimated"), max_points, seed + 1)
    d_ab = _nn_dist(a, b)
    d_ba = _nn_dist(b, a)
    precision = float(np.mean(d_ba < tau))
    recall = float(np.mean(d_ab < tau))
    f = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    cd = float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))
    return ShapeMetrics(cd, precision, recall, f, float(tau), len(a), len(b))


def add_metric(model_points, T_gt: RigidTransform, T_est: RigidTransform) -> float:
    """Mean distance between model points moved by the true and estimated poses."""
    P = _cloud(model_points, "model")
    return float(np.mean(np.linalg.norm(T_gt.apply(P) - T_est.apply(P), axis=1)))


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise LengthMismatch(f"lengths differ: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise LengthMismatch("need at least 3 pairs")
    rx = rankdata(x)
    ry = rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sx = np.sqrt(np.sum(rx * rx))
    sy = np.sqrt(np.sum(ry * ry))
    if sx == 0 or sy == 0:
        raise DegenerateVariance("rank vector is constant")
    return float(np.clip(np.sum(rx * ry) / (sx * sy), -1.0, 1.0))


def nn_baseline_eval(train, test) -> float:
    """Mean distance from each test point to its nearest training point."""
    return float(np.mean(_nn_dist(_cloud(test, "test"), _cloud(train, "train"))))


def radial_error(pred_points, true_points) -> float:
    """Mean Euclidean distance between paired points."""
    a = as_points(pred_points).reshape(-1, 3)
    b = as_points(true_points).reshape(-1, 3)
    if len(a) != len(b):
        raise LengthMismatch("point sets differ in length")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def write_json(path, metrics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def append_csv(path, metrics: dict) -> None:
    """Append one row to a CSV ledger, writing the header for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=sorted(metrics), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(metrics)
