"""Exact Gaussian-process regression of distance on direction.

Inputs are direction parameter vectors ``psi = (phi, theta)`` of shape
``(N, 2)``. Depending on ``distance_mode`` kernels see either the raw angle
pairs (``angle_params``) or the corresponding unit bearing vectors
(``bearing_euclidean``, the default; avoids the azimuth seam).

Hyperparameters are kept in log space. The signal variance is fixed to one;
:func:`fit` divides the targets by their mean before optimising and
:func:`predict` multiplies back.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.spatial.distance import pdist

from .errors import NonFiniteLoss, NotPositiveDefinite
from .geometry import bearing

log = logging.getLogger(__name__)

KERNELS = ("rq", "rbf", "matern", "periodic", "linear", "polynomial")
STATIONARY = ("rq", "rbf", "matern", "periodic")
DISTANCE_MODES = ("bearing_euclidean", "angle_params")
POLY_DEGREE = 3
JITTER_LEVELS = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelConfig:
    """Kernel family, distance mode and log-hyperparameters.

    Hyperparameters left as ``None`` are initialised from the data by
    :func:`fit`. ``log_noise`` is the log of the observation noise *variance*.
    ``log_alpha`` is only used by ``rq`` and ``log_period`` only by
    ``periodic``.
    """

    kind: str = "rq"
    log_lengthscale: float | None = None
    log_alpha: float | None = None
    log_noise: float | None = None
    log_period: float | None = None
    distance_mode: str = "bearing_euclidean"

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; choose from {KERNELS}")
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"unknown distance mode {self.distance_mode!r}")
        for name in self.param_names:
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} must be finite")

    @property
    def param_names(self) -> tuple[str, ...]:
        names = ["log_lengthscale"]
        if self.kind == "rq":
            names.append("log_alpha")
        if self.kind == "periodic":
            names.append("log_period")
        names.append("log_noise")
        return tuple(names)

    @property
    def resolved(self) -> bool:
        return all(getattr(self, n) is not None for n in self.param_names)

    def get_params(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.param_names], dtype=np.float64)

    def with_params(self, theta) -> "KernelConfig":
        return replace(self, **{n: float(v) for n, v in zip(self.param_names, theta)})

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def noise(self) -> float:
        return math.exp(self.log_noise)

    @property
    def period(self) -> float:
        return math.exp(self.log_period)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "distance_mode": self.distance_mode}
        for n in ("log_lengthscale", "log_alpha", "log_noise", "log_period"):
            d[n] = getattr(self, n)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        return cls(**{k: d.get(k) for k in ("kind", "log_lengthscale", "log_alpha", "log_noise",
                                             "log_period", "distance_mode") if k in d})


def features(psi, mode: str) -> np.ndarray:
    """Kernel input features for direction parameters ``psi`` (shape ``(N, 2)``)."""
    psi = np.asarray(psi, dtype=np.float64).reshape(-1, 2)
    if mode == "bearing_euclidean":
        return bearing(psi[:, 0], psi[:, 1])
    return psi.copy()


def _sqdist(X1, X2, same: bool) -> np.ndarray:
    r2 = (np.sum(X1 ** 2, axis=1)[:, None] + np.sum(X2 ** 2, axis=1)[None, :]
          - 2.0 * np.einsum("id,jd->ij", X1, X2))
    np.maximum(r2, 0.0, out=r2)
    if same:
        np.fill_diagonal(r2, 0.0)
    return r2


def kernel_matrix(cfg: KernelConfig, X1, X2=None, grad: bool = False):
    """Covariance matrix between feature sets.

    Returns ``K`` or, with ``grad=True``, ``(K, dK)`` where ``dK`` maps every
    kernel hyperparameter name (not ``log_noise``) to ``dK/d(name)``.
    """
    same = X2 is None
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = X1 if same else np.asarray(X2, dtype=np.float64)
    l2 = math.exp(2.0 * cfg.log_lengthscale)
    kind = cfg.kind
    dK = {}
    if kind in ("rq", "rbf", "matern"):
        r2 = _sqdist(X1, X2, same)
        if kind == "rbf":
            K = np.exp(-0.5 * r2 / l2)
            dK["log_lengthscale"] = K * r2 / l2
        elif kind == "rq":
            a = cfg.alpha
            z = r2 / (2.0 * a * l2)
            lz = np.log1p(z)
            K = np.exp(-a * lz)
            if grad:
                dK["log_lengthscale"] = (r2 / l2) * np.exp(-(a + 1.0) * lz)
                dK["log_alpha"] = K * a * (z / (1.0 + z) - lz)
        else:
            s = math.sqrt(5.0) * np.sqrt(r2) / math.sqrt(l2)
            e = np.exp(-s)
            K = (1.0 + s + s * s / 3.0) * e
            if grad:
                dK["log_lengthscale"] = (s * s / 3.0) * (1.0 + s) * e
    elif kind == "periodic":
        p = cfg.period
        S = np.zeros((len(X1), len(X2)))
        T = np.zeros_like(S)
        for dim in range(X1.shape[1]):
            delta = X1[:, dim][:, None] - X2[:, dim][None, :]
            arg = np.pi * delta / p
            S += np.sin(arg) ** 2
            if grad:
                T += delta * np.sin(2.0 * arg)
        K = np.exp(-2.0 * S / l2)
        if grad:
            dK["log_lengthscale"] = K * 4.0 * S / l2
            dK["log_period"] = K * (2.0 * np.pi / (l2 * p)) * T
    else:
        s = np.einsum("id,jd->ij", X1, X2) / l2
        if kind == "linear":
            K = 1.0 + s
            dK["log_lengthscale"] = -2.0 * s
        else:
            K = (1.0 + s) ** POLY_DEGREE
            if grad:
                dK["log_lengthscale"] = POLY_DEGREE * (1.0 + s) ** (POLY_DEGREE - 1) * (-2.0 * s)
    if grad:
        return K, dK
    return K


def kernel_diag(cfg: KernelConfig, X) -> np.ndarray:
    """``k(x, x)`` for each row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if cfg.kind in STATIONARY:
        return np.ones(len(X))
    s = np.sum(X * X, axis=1) / math.exp(2.0 * cfg.log_lengthscale)
    return 1.0 + s if cfg.kind == "linear" else (1.0 + s) ** POLY_DEGREE


def kernel_eval(cfg: KernelConfig, psi_i, psi_j) -> float:
    """Kernel value between two direction parameter vectors."""
    Xi = features(psi_i, cfg.distance_mode)
    Xj = features(psi_j, cfg.distance_mode)
    return float(kernel_matrix(cfg, Xi, Xj)[0, 0])


@dataclass
class _Factor:
    L: np.ndarray
    jitter_level: float
    jitter: float


def _factorize(A: np.ndarray) -> _Factor:
    base = float(np.mean(np.diag(A)))
    if not math.isfinite(base):
        raise NotPositiveDefinite("covariance matrix has non-finite entries")
    n = len(A)
    for level in JITTER_LEVELS:
        jitter = level * base
        try:
            L = linalg.cholesky(A + jitter * np.eye(n), lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return _Factor(L, level, jitter)
    raise NotPositiveDefinite(
        f"covariance not positive definite after jitter up to {JITTER_LEVELS[-1]:g} x mean(diag)")


def _cho_inverse(L: np.ndarray) -> np.ndarray:
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise NotPositiveDefinite("inverse from Cholesky factor failed")
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def _nmll(X, y, cfg: KernelConfig, grad: bool):
    n = len(y)
    if grad:
        K, dK = kernel_matrix(cfg, X, grad=True)
    else:
        K = kernel_matrix(cfg, X)
    noise = cfg.noise
    A = K + noise * np.eye(n)
    fac = _factorize(A)
    alpha = linalg.cho_solve((fac.L, True), y, check_finite=False)
    value = 0.5 * float(y @ alpha) + float(np.sum(np.log(np.diag(fac.L)))) + 0.5 * n * LOG_2PI
    if not grad:
        return value, None, fac, alpha
    W = _cho_inverse(fac.L) - np.outer(alpha, alpha)
    trW = float(np.trace(W))
    g = np.empty(len(cfg.param_names))
    for i, name in enumerate(cfg.param_names):
        if name == "log_noise":
            dA_diag_mean = noise
            g[i] = 0.5 * noise * trW
        else:
            D = dK[name]
            dA_diag_mean = float(np.mean(np.diag(D)))
            g[i] = 0.5 * float(np.sum(W * D))
        # jitter is proportional to mean(diag(A)), so it moves with the parameters
        g[i] += 0.5 * fac.jitter_level * dA_diag_mean * trW
    return value, g, fac, alpha


def nmll(psi, targets, cfg: KernelConfig, grad: bool = False):
    """Negative marginal log likelihood of ``targets`` under the GP prior.

    ``0.5 y^T A^{-1} y + 0.5 log|A| + (n/2) log(2 pi)`` with
    ``A = K + sigma^2 I + jitter I``, computed through a Cholesky factor.
    With ``grad=True`` returns ``(value, gradient)``, the gradient taken with
    respect to ``cfg.param_names``.
    """
    y = np.asarray(targets, dtype=np.float64).ravel()
    if len(y) < 1:
        raise ValueError("need at least one training point")
    if not cfg.resolved:
        raise ValueError("kernel hyperparameters are not set")
    X = features(psi, cfg.distance_mode)
    value, g, _, _ = _nmll(X, y, cfg, grad)
    return (value, g) if grad else value


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam with a reduce-on-plateau learning-rate schedule."""

    iterations: int = 250
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class GpModel:
    """A conditioned GP. Immutable; rebuild with :func:`condition`."""

    kernel: KernelConfig
    train_psi: np.ndarray
    train_d: np.ndarray
    target_scale: float
    X: np.ndarray = field(repr=False)
    chol: np.ndarray = field(repr=False)
    alpha_vec: np.ndarray = field(repr=False)
    jitter: float = 0.0
    nmll: float = float("nan")
    history: tuple = field(default=(), repr=False)
    status: str = "ok"

    def __len__(self):
        return len(self.train_d)


def _median_distance(X: np.ndarray, max_points: int = 1000) -> float:
    if len(X) > max_points:
        X = X[np.linspace(0, len(X) - 1, max_points).astype(int)]
    if len(X) < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


def initial_config(cfg: KernelConfig, psi, targets) -> KernelConfig:
    """Fill unset hyperparameters with data-driven starting values."""
    y = np.asarray(targets, dtype=np.float64)
    scale = _target_scale(y)
    init = {
        "log_lengthscale": math.log(_median_distance(features(psi, cfg.distance_mode))),
        "log_alpha": 0.0,
        "log_noise": math.log(1e-4 * float(np.var(y / scale)) + 1e-8),
        "log_period": math.log(2.0 * math.pi),
    }
    return replace(cfg, **{k: v for k, v in init.items() if getattr(cfg, k) is None})


def _target_scale(y: np.ndarray) -> float:
    m = float(np.mean(y)) if len(y) else 1.0
    return m if m > 0 and math.isfinite(m) else 1.0


def condition(psi, targets, cfg: KernelConfig, nmll_value: float | None = None,
              history: tuple = (), status: str = "ok") -> GpModel:
    """Condition the GP on data at fixed hyperparameters (no optimisation)."""
    psi = np.asarray(psi, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(targets, dtype=np.float64).ravel()
    if len(psi) != len(d) or len(d) < 1:
        raise ValueError("inputs and targets must have the same non-zero length")
    cfg = initial_config(cfg, psi, d)
    scale = _target_scale(d)
    X = features(psi, cfg.distance_mode)
    value, _, fac, alpha = _nmll(X, d / scale, cfg, grad=False)
    for arr in (psi, d, X, fac.L, alpha):
        arr.setflags(write=False)
    return GpModel(cfg, psi, d, scale, X, fac.L, alpha, fac.jitter,
                   value if nmll_value is None else nmll_value, history, status)


def fit(psi, targets, cfg: KernelConfig | None = None,
        opt: OptimizerConfig | None = None) -> GpModel:
    """Optimise the hyperparameters by minimising the NMLL with Adam.

    The learning rate is multiplied by ``plateau_factor`` once the loss has
    failed to improve (by a relative ``plateau_threshold``) for more than
    ``plateau_patience`` consecutive iterations. The best iterate seen,
    including the starting point, is returned, so the final NMLL never
    exceeds the initial one. If an iterate becomes numerically invalid the
    optimisation stops early and the best finite iterate is kept; it also
    stops once the schedule has pushed the learning rate below ``min_lr``.
    """
    cfg = cfg or KernelConfig()
    opt = opt or OptimizerConfig()
    psi = np.asarray(psi, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(targets, dtype=np.float64).ravel()
    if len(psi) != len(d) or len(d) < 1:
        raise ValueError("inputs and targets must have the same non-zero length")
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(d))):
        raise ValueError("inputs and targets must be finite")
    cfg = initial_config(cfg, psi, d)
    y = d / _target_scale(d)
    X = features(psi, cfg.distance_mode)

    theta = cfg.get_params()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    lr = opt.lr
    best_theta, best_loss = theta.copy(), math.inf
    plateau_best, bad = math.inf, 0
    history = []
    status = "ok"
    for it in range(opt.iterations + 1):
        try:
            loss, g, _, _ = _nmll(X, y, cfg.with_params(theta), grad=it < opt.iterations)
        except NotPositiveDefinite:
            if it == 0:
                raise
            status = "not_positive_definite"
            log.warning("GP fit stopped at iteration %d: covariance lost positive definiteness", it)
            break
        if not math.isfinite(loss) or (g is not None and not np.all(np.isfinite(g))):
            if it == 0:
                raise NonFiniteLoss("initial NMLL is not finite")
            status = "non_finite"
            log.warning("GP fit stopped at iteration %d: non-finite loss", it)
            break
        history.append(loss)
        if loss < best_loss:
            best_loss, best_theta = loss, theta.copy()
        if it == opt.iterations:
            break
        if not math.isfinite(plateau_best) or \
                loss < plateau_best - opt.plateau_threshold * abs(plateau_best):
            plateau_best, bad = loss, 0
        else:
            bad += 1
            if bad > opt.plateau_patience:
                lr *= opt.plateau_factor
                bad = 0
                if lr < opt.min_lr:
                    status = "lr_exhausted"
                    break
        t = it + 1
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1 ** t)
        v_hat = v / (1.0 - opt.beta2 ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return condition(psi, d, cfg.with_params(best_theta), nmll_value=best_loss,
                     history=tuple(history), status=status)


def predict(model: GpModel, psi) -> Prediction:
    """Posterior mean and variance of the distance at query directions.

    Means are clamped at zero; variances are floored at zero and expressed in
    squared target units.
    """
    Xq = features(psi, model.kernel.distance_mode)
    Ks = kernel_matrix(model.kernel, Xq, model.X)
    mean = np.sum(Ks * model.alpha_vec, axis=1) * model.target_scale
    w = linalg.solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var = kernel_diag(model.kernel, Xq) - np.sum(w * w, axis=0)
    return Prediction(np.maximum(mean, 0.0), np.maximum(var, 0.0) * model.target_scale ** 2)


def predict_mean(model: GpModel, psi) -> np.ndarray:
    Xq = features(psi, model.kernel.distance_mode)
    # row-wise sums keep each prediction independent of the batch it is in
    mu = np.sum(kernel_matrix(model.kernel, Xq, model.X) * model.alpha_vec, axis=1)
    return np.maximum(mu, 0.0) * model.target_scale
