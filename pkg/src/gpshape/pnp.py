"""Perspective-n-Point: linear (DLT) initialisation and Levenberg-Marquardt refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration
from .geometry import MIN_DEPTH, CameraIntrinsics, RigidTransform, as_points

log = logging.getLogger(__name__)

MIN_POINTS = 6
PLANARITY_TOL = 1e-6


@dataclass(frozen=True)
class PnPResult:
    pose: RigidTransform
    rms: float
    iterations: int
    converged: bool
    inliers: np.ndarray | None = None


def _skew(v: np.ndarray) -> np.ndarray:
    """Stacked cross-product matrices for rows of ``v`` (shape ``(N, 3, 3)``)."""
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _check_configuration(X: np.ndarray) -> None:
    if len(X) < MIN_POINTS:
        raise DegenerateConfiguration(f"need at least {MIN_POINTS} correspondences, got {len(X)}")
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[2] / sv[0] < PLANARITY_TOL:
        raise DegenerateConfiguration("object points are coplanar or collinear")


def reprojection_residuals(T: RigidTransform, X: np.ndarray, pixels: np.ndarray,
                           cam: CameraIntrinsics) -> np.ndarray:
    """Flattened ``(2N,)`` pixel residuals ``project(T X) - pixels``."""
    p = T.apply(X)
    z = p[:, 2]
    u = cam.fx * p[:, 0] / z + cam.cx
    v = cam.fy * p[:, 1] / z + cam.cy
    return np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1).ravel()


def reprojection_rms(T: RigidTransform, object_points, pixels, cam: CameraIntrinsics) -> float:
    X = as_points(object_points).reshape(-1, 3)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    r = reprojection_residuals(T, X, px, cam)
    return float(np.sqrt(np.mean(r.reshape(-1, 2) ** 2) * 2.0))


def dlt(object_points, pixels, cam: CameraIntrinsics) -> RigidTransform:
    """Linear pose from at least six non-coplanar correspondences.

    Works in normalised image coordinates with the object points centred and
    scaled; the rotation is the nearest orthonormal matrix to the recovered
    3x3 block.
    """
    X = as_points(object_points).reshape(-1, 3)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    _check_configuration(X)
    m = cam.ray(px)[:, :2]
    c = X.mean(axis=0)
    s = np.sqrt(np.mean(np.sum((X - c) ** 2, axis=1)))
    Xn = np.hstack([(X - c) / s, np.ones((len(X), 1))])
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -m[:, :1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -m[:, 1:] * Xn
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    if sv[-2] <= 1e-12 * sv[0]:
        raise DegenerateConfiguration("DLT system is rank deficient")
    P = Vt[-1].reshape(3, 4)
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    U, S, Vt3 = np.linalg.svd(P[:, :3])
    R = U @ Vt3
    t = P[:, 3] / S.mean()
    # undo the object-point normalisation: R (X - c) / s + t  ~  R X + (s t - R c)
    return RigidTransform(R, s * t - R @ c)


def refine_lm(T0: RigidTransform, object_points, pixels, cam: CameraIntrinsics,
              max_iters: int = 100, tol: float = 1e-14) -> PnPResult:
    """Levenberg-Marquardt on the reprojection error.

    Rotation updates are left-multiplied increments ``exp([dw]x) R``; the
    Jacobian is analytic. The best iterate is returned; ``converged`` is False
    when ``max_iters`` is reached first.
    """
    X = as_points(object_points).reshape(-1, 3)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    R, t = T0.rotation.copy(), T0.translation.copy()

    def evaluate(R, t):
        p = X @ R.T + t
        if np.any(p[:, 2] <= MIN_DEPTH):
            return None, None
        z = p[:, 2]
        r = np.stack([cam.fx * p[:, 0] / z + cam.cx - px[:, 0],
                      cam.fy * p[:, 1] / z + cam.cy - px[:, 1]], axis=1).ravel()
        return p, r

    p, r = evaluate(R, t)
    if r is None:
        raise DegenerateConfiguration("initial pose puts points behind the camera")
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        z = p[:, 2]
        Jp = np.zeros((len(X), 2, 3))
        Jp[:, 0, 0] = cam.fx / z
        Jp[:, 0, 2] = -cam.fx * p[:, 0] / z ** 2
        Jp[:, 1, 1] = cam.fy / z
        Jp[:, 1, 2] = -cam.fy * p[:, 1] / z ** 2
        RX = p - t
        J = np.concatenate([-Jp @ _skew(RX), Jp], axis=2).reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) <= tol * max(1.0, cost):
            converged = True
            break
        improved = False
        while lam < 1e16:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-300), -g)
            R_new = Rotation.from_rotvec(step[:3]).as_matrix() @ R
            t_new = t + step[3:]
            p_new, r_new = evaluate(R_new, t_new)
            if r_new is not None and float(r_new @ r_new) < cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            converged = True
            break
        new_cost = float(r_new @ r_new)
        small = np.linalg.norm(step) <= 1e-15 * (np.linalg.norm(t) + 1.0)
        R, t, p, r = R_new, t_new, p_new, r_new
        rel = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        lam = max(lam / 10.0, 1e-12)
        if small or rel < tol or cost == 0.0:
            converged = True
            break
    if not converged:
        log.info("PnP refinement stopped after %d iterations without converging", max_iters)
    # re-orthonormalise against accumulated roundoff
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    T = RigidTransform(R, t)
    return PnPResult(T, float(np.sqrt(cost / len(X))), it, converged)


def solve_pnp(object_points, pixels, cam: CameraIntrinsics, max_iters: int = 100) -> PnPResult:
    """DLT initialisation followed by Levenberg-Marquardt refinement."""
    T0 = dlt(object_points, pixels, cam)
    return refine_lm(T0, object_points, pixels, cam, max_iters=max_iters)


def solve_pnp_ransac(object_points, pixels, cam: CameraIntrinsics, rng: np.random.Generator,
                     threshold_px: float = 8.0, iterations: int = 200,
                     max_iters: int = 100) -> PnPResult:
    """Robust variant: minimal-sample DLT hypotheses, refit on the largest inlier set."""
    X = as_points(object_points).reshape(-1, 3)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    _check_configuration(X)
    best = None
    for _ in range(iterations):
        idx = rng.choice(len(X), size=MIN_POINTS, replace=False)
        try:
            T = dlt(X[idx], px[idx], cam)
        except DegenerateConfiguration:
            continue
        if np.any(T.apply(X)[:, 2] <= MIN_DEPTH):
            continue
        err = np.linalg.norm(reprojection_residuals(T, X, px, cam).reshape(-1, 2), axis=1)
        inl = err < threshold_px
        if best is None or inl.sum() > best.sum():
            best = inl
    if best is None or best.sum() < MIN_POINTS:
        res = solve_pnp(X, px, cam, max_iters)
        return PnPResult(res.pose, res.rms, res.iterations, res.converged, np.ones(len(X), bool))
    res = solve_pnp(X[best], px[best], cam, max_iters)
    return PnPResult(res.pose, res.rms, res.iterations, res.converged, best)
