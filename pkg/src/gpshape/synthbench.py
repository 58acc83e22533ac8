"""Synthetic pose-quality benchmark.

For every cell of a pose grid crossed with a noise grid, and for several
trials per cell: place the object at a ground-truth pose, project model
points, corrupt the pixels with a two-component Gaussian mixture, recover a
pose by PnP, then record ADD against the ground truth together with the
template confidence of the recovered pose.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .confidence import Correspondences, score_pose
from .errors import ConfigError, GPShapeError, ParseError
from .geometry import CameraIntrinsics, RigidTransform, as_points
from .metrics import add_metric, spearman
from .pnp import solve_pnp, solve_pnp_ransac
from .template import ShapeTemplate

log = logging.getLogger(__name__)

CSV_HEADER = ("object", "yaw", "pitch", "roll", "dist", "outlier_prob", "sigma_o", "trial",
              "add", "confidence", "bound", "pnp_failed")
DEFAULT_INTRINSICS = CameraIntrinsics(800.0, 800.0, 320.0, 320.0)


@dataclass(frozen=True)
class NoiseModel:
    sigma_inlier: float = 2.0
    sigma_outlier: float = 15.0
    outlier_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ConfigError("outlier_prob must lie in [0, 1]")
        if self.sigma_inlier < 0 or self.sigma_outlier < 0:
            raise ConfigError("noise standard deviations must be non-negative")


@dataclass(frozen=True)
class SweepConfig:
    """Pose grid (degrees and normalised units), noise grid and trial settings.

    A grid distance ``d`` places the object centre at depth ``standoff + d``,
    i.e. ``d`` is the gap between the camera and the object's bounding sphere
    (radius 1 after normalisation).
    """

    yaw_deg: tuple = (-60.0, -30.0, 0.0, 30.0, 60.0)
    pitch_deg: tuple = (-60.0, -30.0, 0.0, 30.0, 60.0)
    roll_deg: tuple = (0.0,)
    distances: tuple = (0.8, 1.2, 1.6)
    outlier_probs: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    sigma_outliers: tuple = (10.0, 20.0, 40.0)
    trials: int = 5
    n_points: int = 500
    sigma_inlier: float = 2.0
    standoff: float = 1.0
    delta: float = 0.01
    seed: int = 0
    ransac: bool = False
    intrinsics: CameraIntrinsics = field(default=DEFAULT_INTRINSICS)

    def __post_init__(self):
        for name in ("yaw_deg", "pitch_deg", "roll_deg", "distances", "outlier_probs",
                     "sigma_outliers"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ConfigError(f"sweep grid '{name}' is empty")
            object.__setattr__(self, name, vals)
        if self.trials < 1 or self.n_points < 6:
            raise ConfigError("need trials >= 1 and n_points >= 6")
        if any(self.standoff + d <= 0 for d in self.distances):
            raise ConfigError("object depth must be positive")
        if any(not 0.0 <= p <= 1.0 for p in self.outlier_probs):
            raise ConfigError("outlier probabilities must lie in [0, 1]")

    @property
    def cells(self) -> list:
        """Grid cells in sweep order ``(yaw, pitch, roll, dist, outlier_prob, sigma_o)``."""
        return list(itertools.product(self.yaw_deg, self.pitch_deg, self.roll_deg,
                                      self.distances, self.outlier_probs, self.sigma_outliers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = {"fx": self.intrinsics.fx, "fy": self.intrinsics.fy,
                           "cx": self.intrinsics.cx, "cy": self.intrinsics.cy}
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepConfig":
        if not isinstance(doc, dict):
            raise ParseError("sweep config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        kw = dict(doc)
        if "intrinsics" in kw:
            try:
                kw["intrinsics"] = CameraIntrinsics(**{k: float(kw["intrinsics"][k])
                                                       for k in ("fx", "fy", "cx", "cy")})
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad intrinsics in sweep config ({exc})") from exc
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad sweep config ({exc})") from exc


@dataclass(frozen=True)
class TrialResult:
    object: str
    yaw: float
    pitch: float
    roll: float
    dist: float
    outlier_prob: float
    sigma_o: float
    trial: int
    add: float
    confidence: float
    bound: float
    pnp_failed: bool
    cell: int = 0


@dataclass(frozen=True)
class SweepResult:
    rows: tuple
    spearman: float
    n_trials: int
    failures: int

    def summary(self) -> dict:
        return {"spearman": self.spearman, "n_trials": self.n_trials, "failures": self.failures}


def generate_gt_pose(angles, distance: float) -> RigidTransform:
    """Rotation from Z-Y-X Euler angles (radians; yaw, pitch[, roll]) and
    translation ``(0, 0, distance)``."""
    if not distance > 0:
        raise ConfigError("distance must be positive")
    a = list(np.asarray(angles, dtype=np.float64).ravel())
    a += [0.0] * (3 - len(a))
    R = Rotation.from_euler("ZYX", a[:3]).as_matrix()
    return RigidTransform(R, np.array([0.0, 0.0, float(distance)]))


def inject_noise(pixels, model: NoiseModel, rng: np.random.Generator | None = None):
    """Add mixture noise to pixels. Returns ``(noisy, outlier_mask)``."""
    rng = np.random.default_rng(model.seed) if rng is None else rng
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    outlier = rng.random(len(px)) < model.outlier_prob
    sigma = np.where(outlier, model.sigma_outlier, model.sigma_inlier)
    noise = rng.normal(size=px.shape) * sigma[:, None]
    return px + noise, outlier


def run_trial(template: ShapeTemplate, model_points: np.ndarray, cfg: SweepConfig, cell: int,
              trial: int, params: tuple, name: str = "object") -> TrialResult:
    """One pose/noise trial, seeded by ``(cfg.seed, cell, trial)``."""
    yaw, pitch, roll, dist, p_o, s_o = params
    rng = np.random.default_rng([cfg.seed, cell, trial])
    cam = cfg.intrinsics
    T_gt = generate_gt_pose(np.radians([yaw, pitch, roll]), cfg.standoff + dist)
    idx = rng.choice(len(model_points), size=min(cfg.n_points, len(model_points)), replace=False)
    X = model_points[np.sort(idx)]
    clean = cam.project(T_gt.apply(X))
    noisy, _ = inject_noise(clean, NoiseModel(cfg.sigma_inlier, s_o, p_o), rng)
    failed = False
    add = conf = bound = math.nan
    try:
        if cfg.ransac:
            res = solve_pnp_ransac(X, noisy, cam, rng)
        else:
            res = solve_pnp(X, noisy, cam)
        report = score_pose(template, Correspondences(noisy, X), res.pose, cam, delta=cfg.delta)
        add = add_metric(model_points, T_gt, res.pose)
        conf, bound = report.score, report.bound
    except (GPShapeError, np.linalg.LinAlgError) as exc:
        log.info("trial %d of cell %d failed: %s", trial, cell, exc)
        failed = True
    return TrialResult(name, yaw, pitch, roll, dist, p_o, s_o, trial, add, conf, bound,
                       failed, cell)


def run_sweep(template: ShapeTemplate, model_points, cfg: SweepConfig | None = None,
              name: str = "object", threads: int = 1, on_row=None) -> SweepResult:
    """Run every trial of every cell and correlate ADD with confidence.

    Rows are ordered by ``(cell, trial)`` irrespective of ``threads``.
    ``on_row`` is called with each row in that order as soon as it is
    available. Failed trials are kept (flagged) but left out of the
    correlation.
    """
    cfg = cfg or SweepConfig()
    P = as_points(model_points).reshape(-1, 3)
    jobs = [(c, t, params) for c, params in enumerate(cfg.cells) for t in range(cfg.trials)]

    def work(job):
        c, t, params = job
        return run_trial(template, P, cfg, c, t, params, name)

    rows = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for row in pool.map(work, jobs):
                rows.append(row)
                if on_row:
                    on_row(row)
    else:
        for job in jobs:
            row = work(job)
            rows.append(row)
            if on_row:
                on_row(row)
    ok = [r for r in rows if not r.pnp_failed]
    rho = spearman([r.add for r in ok], [r.confidence for r in ok]) if len(ok) >= 3 else math.nan
    return SweepResult(tuple(rows), rho, len(rows), len(rows) - len(ok))


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def csv_row(row: TrialResult) -> list:
    return [_fmt(getattr(row, k)) for k in CSV_HEADER]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(csv_row(r))
    return buf.getvalue()


def read_results_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def noise_trend(rows, n_sigma: float = 3.0) -> dict:
    """Mean confidence per ``(sigma_o, outlier_prob)`` and whether it is
    non-increasing in ``outlier_prob`` within ``n_sigma`` standard errors.

    Returns ``{sigma_o: [(outlier_prob, mean, stderr, n), ...]}`` plus a
    ``"monotone"`` flag and the list of ``"violations"``.
    """
    groups: dict = {}
    for r in rows:
        if r.pnp_failed:
            continue
        groups.setdefault(r.sigma_o, {}).setdefault(r.outlier_prob, []).append(r.confidence)
    table, violations = {}, []
    for s_o in sorted(groups):
        stats = []
        for p_o in sorted(groups[s_o]):
            v = np.asarray(groups[s_o][p_o])
            se = float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
            stats.append((p_o, float(np.mean(v)), se, len(v)))
        for a, b in zip(stats, stats[1:]):
            if b[1] > a[1] + n_sigma * math.hypot(a[2], b[2]):
                violations.append((s_o, a[0], b[0]))
        table[s_o] = stats
    return {"cells": table, "monotone": not violations, "violations": violations}


def load_sweep_config(path) -> SweepConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    return SweepConfig.from_dict(doc)
