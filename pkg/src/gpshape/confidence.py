"""Pose confidence from 2D-3D correspondences and a shape template.

A candidate pose ``T`` (object to camera) is checked by lifting every
matched pixel back into the object frame and asking the template how likely
that point is to lie on the surface.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, InvalidDelta, NoUsablePoints, ParseError
from .geometry import MIN_DEPTH, CameraIntrinsics, RigidTransform, as_points
from .template import ShapeTemplate, likelihood_table

log = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Correspondences:
    """Matched pixels ``(N, 2)``, object-frame points ``(N, 3)`` and weights.

    Weights are normalised to sum to one on construction; ``None`` means
    uniform.
    """

    pixels: np.ndarray
    object_points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        P = as_points(self.object_points).reshape(-1, 3)
        if len(px) != len(P):
            raise ValueError("pixels and object points differ in length")
        if self.weights is None:
            w = np.full(len(px), 1.0 / max(len(px), 1))
        else:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if len(w) != len(px):
                raise ValueError("weights and pixels differ in length")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and non-negative")
            total = w.sum()
            if total <= 0:
                raise ValueError("weights sum to zero")
            w = w / total
        for name, arr in (("pixels", px), ("object_points", P), ("weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.pixels)


@dataclass(frozen=True)
class ConfidenceReport:
    """Score, lower bound and per-point diagnostics for one pose.

    Per-point arrays cover only the correspondences that survived
    back-projection; ``excluded`` lists the indices that did not.
    """

    score: float
    bound: float
    delta: float
    points: np.ndarray
    best_cluster: np.ndarray
    density: np.ndarray
    residual: np.ndarray
    weights: np.ndarray
    sigma_star: np.ndarray
    excluded: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)

    @property
    def per_point(self) -> list:
        return [(self.points[i], int(self.best_cluster[i]), float(self.density[i]),
                 float(self.residual[i])) for i in range(self.n_points)]


def back_project_points(pixels, object_points, T: RigidTransform, cam: CameraIntrinsics):
    """Lift pixels into the object frame at the depth implied by ``T``.

    Each pixel's camera ray is cut at the camera-frame depth of its
    transformed object point and the result is mapped back by ``T^-1``.
    Returns ``(points, valid)``; rows with non-positive depth are NaN and
    ``valid`` is False there.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = T.apply(as_points(object_points).reshape(-1, 3))[:, 2]
    valid = z > MIN_DEPTH
    out = np.full((len(px), 3), np.nan)
    if valid.any():
        cam_pts = cam.ray(px[valid]) * z[valid, None]
        out[valid] = T.inverse().apply(cam_pts)
    return out, valid


def back_project(corrs: Correspondences, T: RigidTransform, cam: CameraIntrinsics) -> np.ndarray:
    """Object-frame points for every correspondence; raises if any is behind the camera."""
    pts, valid = back_project_points(corrs.pixels, corrs.object_points, T, cam)
    if not valid.all():
        raise BehindCamera(f"{int((~valid).sum())} correspondence(s) behind the camera")
    return pts


def confidence_bound(sigmas, weights, delta: float) -> float:
    """Lower bound on the weighted mean density when every residual lies in ``[-delta, delta]``.

    ``sum_i w_i sigma_i (1 - exp(-delta^2 / (2 sigma_i^2))) / (sqrt(2 pi) delta^2)``

    Parameters
    ----------
    sigmas : array_like or ShapeTemplate
        Per-point standard deviations. Given a template, its per-cluster
        calibrated deviations are used and ``weights`` defaults to the
        clusters' training shares.
    weights : array_like or None
        Non-negative weights; normalised to sum to one.
    delta : float
        Residual margin, in model units. Must be positive.
    """
    if not (delta > 0) or not math.isfinite(delta):
        raise InvalidDelta(f"delta must be positive and finite, got {delta}")
    if isinstance(sigmas, ShapeTemplate):
        s = sigmas.calibrated_sigma
        w = sigmas.training_share if weights is None else np.asarray(weights, dtype=np.float64)
    else:
        s = np.asarray(sigmas, dtype=np.float64).ravel()
        w = np.full(len(s), 1.0 / len(s)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w.ravel()
    if len(w) != len(s) or len(s) == 0:
        raise ValueError("sigmas and weights must be non-empty and of equal length")
    w = w / w.sum()
    terms = w * s * -np.expm1(-delta * delta / (2.0 * s * s))
    return float(np.sum(terms) / (SQRT_2PI * delta * delta))


def score_pose(template: ShapeTemplate, corrs: Correspondences, T: RigidTransform,
               cam: CameraIntrinsics, weights_mode: str = "uniform",
               delta: float = 0.01) -> ConfidenceReport:
    """Weighted sum of max-over-clusters densities of the back-projected points.

    Parameters
    ----------
    weights_mode : {"uniform", "given"}
        ``uniform`` uses ``1/N`` over the usable points, ``given`` uses the
        correspondence weights renormalised over the usable points.
    delta : float
        Margin for the accompanying lower bound, in model units.
    """
    if weights_mode not in ("uniform", "given"):
        raise ValueError(f"unknown weights_mode {weights_mode!r}")
    if not (delta > 0) or not math.isfinite(delta):
        raise InvalidDelta(f"delta must be positive and finite, got {delta}")
    pts, valid = back_project_points(corrs.pixels, corrs.object_points, T, cam)
    excluded = np.flatnonzero(~valid)
    if len(excluded):
        log.warning("%d correspondence(s) behind the camera were excluded", len(excluded))
    if not valid.any():
        raise NoUsablePoints("no correspondence survived back-projection")
    pts = pts[valid]
    if weights_mode == "uniform":
        w = np.full(len(pts), 1.0 / len(pts))
    else:
        w = corrs.weights[valid]
        total = w.sum()
        if total <= 0:
            raise NoUsablePoints("usable correspondences carry zero weight")
        w = w / total
    tab = likelihood_table(template, pts)
    best = tab["best_cluster"]
    rows = np.arange(len(pts))
    density = tab["max_density"]
    residual = tab["distances"][rows, best] - tab["means"][rows, best]
    sigma_star = template.calibrated_sigma[best]
    score = float(np.sum(w * density))
    bound = confidence_bound(sigma_star, w, delta)
    return ConfidenceReport(score, bound, float(delta), pts, best, density, residual, w,
                            sigma_star, excluded)


def accept_pose(report: ConfidenceReport, threshold: float) -> bool:
    return report.score >= threshold


def max_score(report: ConfidenceReport) -> float:
    """Score reached if every scored point had zero residual in its best cluster."""
    return float(np.sum(report.weights / (SQRT_2PI * report.sigma_star)))


def normalize_pose(T: RigidTransform, center, scale: float) -> RigidTransform:
    """Express an original-frame pose in the normalised object frame.

    With ``x_norm = (x - c) s`` the camera point ``R x + t`` becomes
    ``(R x_norm + s (R c + t)) / s``; scaling the camera frame by ``s``
    keeps pixels unchanged, so the normalised pose is ``(R, s (R c + t))``.
    """
    c = np.asarray(center, dtype=np.float64)
    return RigidTransform(T.rotation, scale * (T.rotation @ c + T.translation))


# ---------------------------------------------------------------------------
# file formats

def read_correspondences(path) -> Correspondences:
    """CSV with header ``u,v,X,Y,Z`` and an optional ``w`` column."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = [c.strip() for c in (reader.fieldnames or [])]
            if cols[:5] != ["u", "v", "X", "Y", "Z"] or cols[5:] not in ([], ["w"]):
                raise ParseError(f"{path}: expected header u,v,X,Y,Z[,w], got {cols}")
            rows = [[float(r[k]) for k in reader.fieldnames] for r in reader]
    except (ValueError, TypeError, KeyError) as exc:
        raise ParseError(f"{path}: malformed correspondence row ({exc})") from exc
    if not rows:
        raise ParseError(f"{path}: no correspondences")
    a = np.array(rows)
    if not np.all(np.isfinite(a)):
        raise ParseError(f"{path}: non-finite values")
    return Correspondences(a[:, :2], a[:, 2:5], a[:, 5] if a.shape[1] == 6 else None)


def write_correspondences(path, corrs: Correspondences, with_weights: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v", "X", "Y", "Z"] + (["w"] if with_weights else []))
        for i in range(len(corrs)):
            row = list(corrs.pixels[i]) + list(corrs.object_points[i])
            if with_weights:
                row.append(corrs.weights[i])
            w.writerow([f"{x:.17g}" for x in row])


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object")
    return doc


def read_pose(path) -> RigidTransform:
    """JSON ``{"rotation": [9 row-major], "translation": [3]}``."""
    doc = _load_json(path)
    try:
        R = np.array(doc["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.array(doc["translation"], dtype=np.float64).reshape(3)
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"{path}: pose needs rotation[9] and translation[3] ({exc})") from exc
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
        raise ParseError(f"{path}: non-finite pose entries")
    return RigidTransform(R, t)


def write_pose(path, T: RigidTransform) -> None:
    doc = {"rotation": [float(x) for x in T.rotation.ravel()],
           "translation": [float(x) for x in T.translation]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_intrinsics(path) -> CameraIntrinsics:
    """JSON ``{"fx", "fy", "cx", "cy"}``."""
    doc = _load_json(path)
    try:
        return CameraIntrinsics(*(float(doc[k]) for k in ("fx", "fy", "cx", "cy")))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"{path}: intrinsics need fx, fy, cx, cy ({exc})") from exc


def write_intrinsics(path, cam: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        json.dump({"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy}, fh, indent=2)
        fh.write("\n")
