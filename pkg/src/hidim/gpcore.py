"""Gaussian-process regression with a constant trend and Matern covariance.

The covariance is a tensor product of one-dimensional Matern correlations,
one lengthscale per input, scaled by a process variance ``sigma2``, plus a
nugget on the diagonal::

    C_ij = sigma2 * prod_k m(|x_ik - x_jk| / theta_k) + nugget_i * [i == j]

Hyperparameters are fitted by maximum likelihood.  The constant trend is the
generalized-least-squares estimate; in homoscedastic mode the nugget is a
ratio ``g = nugget / sigma2`` and ``sigma2`` is profiled out in closed form,
while a fixed (heteroscedastic) nugget vector requires ``sigma2`` to be
optimized alongside the log-lengthscales.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from ._exceptions import IllConditionedCovarianceError, InvalidArgumentError
from ._validation import as_matrix, as_vector
from .design import lhs_sample

logger = logging.getLogger(__name__)

__all__ = [
    "KernelConfig",
    "FitTrace",
    "GpModel",
    "matern52",
    "matern32",
    "correlation_matrix",
    "covariance_matrix",
    "negative_log_likelihood",
    "fit_gp",
    "gp_predict",
    "loo_predictions",
    "save_model",
    "load_model",
    "GaussianProcessModel",
]

FORMAT_VERSION = 1
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
NUGGET_RATIO_BOUNDS = (1e-8, 1e2)
VARIANCE_BOUNDS = (1e-6, 1e4)
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_PENALTY = 1e25
_LOG_2PI = math.log(2.0 * math.pi)


def matern52(distance):
    """Matern 5/2 correlation of a lengthscale-scaled distance ``h``."""
    h = np.asarray(distance, dtype=float)
    if np.any(h < 0):
        raise InvalidArgumentError("distance must be nonnegative")
    s = math.sqrt(5.0) * h
    out = (1.0 + s + s * s / 3.0) * np.exp(-s)
    return float(out) if out.ndim == 0 else out


def matern32(distance):
    h = np.asarray(distance, dtype=float)
    if np.any(h < 0):
        raise InvalidArgumentError("distance must be nonnegative")
    s = math.sqrt(3.0) * h
    out = (1.0 + s) * np.exp(-s)
    return float(out) if out.ndim == 0 else out


_MATERN = {2.5: matern52, 1.5: matern32}


def _matern(smoothness):
    try:
        return _MATERN[float(smoothness)]
    except KeyError:
        raise InvalidArgumentError(f"unsupported Matern smoothness {smoothness}; use 1.5 or 2.5") from None


@dataclass(frozen=True)
class KernelConfig:
    """Covariance hyperparameters in the model's input units."""

    lengthscales: np.ndarray
    process_variance: float
    nugget: float | np.ndarray = 0.0
    smoothness: float = 2.5

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        if theta.ndim != 1 or not np.all(theta > 0):
            raise InvalidArgumentError("lengthscales must be a vector of positive reals")
        if not self.process_variance > 0:
            raise InvalidArgumentError("process variance must be positive")
        nugget = np.asarray(self.nugget, dtype=float)
        if np.any(nugget < 0) or not np.all(np.isfinite(nugget)):
            raise InvalidArgumentError("nugget entries must be finite and nonnegative")
        _matern(self.smoothness)
        theta.setflags(write=False)
        object.__setattr__(self, "lengthscales", theta)
        object.__setattr__(self, "process_variance", float(self.process_variance))
        object.__setattr__(self, "nugget", float(nugget) if nugget.ndim == 0 else nugget.copy())

    @property
    def heteroscedastic(self):
        return np.ndim(self.nugget) == 1

    def nugget_vector(self, n):
        if self.heteroscedastic:
            if self.nugget.shape[0] != n:
                raise InvalidArgumentError(f"nugget vector has {self.nugget.shape[0]} entries for {n} points")
            return self.nugget
        return np.full(n, self.nugget)


def _abs_differences(A, B):
    """Stack of per-input absolute differences, shape ``(d, len(A), len(B))``."""
    return np.abs(A.T[:, :, None] - B.T[:, None, :])


def _correlation_from_diffs(diffs, lengthscales, smoothness=2.5):
    corr = _matern(smoothness)
    R = np.ones(diffs.shape[1:])
    for k in range(diffs.shape[0]):
        R *= corr(diffs[k] / lengthscales[k])
    return R


def correlation_matrix(A, B, lengthscales, smoothness=2.5):
    """Cross-correlation ``prod_k m(|a_k - b_k| / theta_k)`` between two point sets."""
    A = as_matrix(A, name="A")
    B = as_matrix(B, name="B")
    theta = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if A.shape[1] != theta.size or B.shape[1] != theta.size:
        raise InvalidArgumentError(
            f"points have {A.shape[1]} and {B.shape[1]} columns for {theta.size} lengthscales"
        )
    return _correlation_from_diffs(_abs_differences(A, B), theta, smoothness)


def _check_duplicates(points, nugget):
    """Two identical rows that both lack a nugget make the covariance singular."""
    _, inverse, counts = np.unique(points, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    for group in np.flatnonzero(counts > 1):
        rows = np.flatnonzero(inverse == group)
        if np.sum(nugget[rows] == 0.0) >= 2:
            raise IllConditionedCovarianceError(
                f"rows {rows.tolist()} are identical and carry no nugget; covariance is singular"
            )


def _cholesky(C, scale):
    """Lower Cholesky factor of ``C`` with diagonal jitter escalation.

    Returns ``(L, jitter)`` where ``jitter`` (relative to ``scale``) was added.
    """
    for jitter in JITTERS:
        A = C if jitter == 0.0 else C + np.diag(np.full(C.shape[0], jitter * scale))
        try:
            L = cholesky(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
    raise IllConditionedCovarianceError(
        f"Cholesky factorization failed up to relative jitter {JITTERS[-1]:g}"
    )


def covariance_matrix(points, kernel, check=True):
    """Covariance of the training points, nugget included.

    With ``check`` the matrix is also factorized (with jitter escalation) and an
    :class:`IllConditionedCovarianceError` raised if that fails.
    """
    X = as_matrix(points, name="points")
    if X.shape[1] != kernel.lengthscales.size:
        raise InvalidArgumentError(
            f"points have {X.shape[1]} columns but the kernel has {kernel.lengthscales.size} lengthscales"
        )
    nugget = kernel.nugget_vector(X.shape[0])
    C = kernel.process_variance * correlation_matrix(X, X, kernel.lengthscales, kernel.smoothness)
    C[np.diag_indices_from(C)] += nugget
    if check:
        _check_duplicates(X, nugget)
        _cholesky(C, kernel.process_variance)
    return C


# --- likelihood ------------------------------------------------------------------


def _gls(L, y):
    """Return (beta, residual, C^-1 residual, L^-1 1) for a constant trend."""
    ones = np.ones(L.shape[0])
    w = solve_triangular(L, ones, lower=True, check_finite=False)
    v = solve_triangular(L, y, lower=True, check_finite=False)
    beta = float(w @ v / (w @ w))
    resid = y - beta
    alpha = cho_solve((L, True), resid, check_finite=False)
    return beta, resid, alpha, w


def _profiled_nll(R, y, ratio, variance_floor):
    """Profiled NLL for ``C = sigma2 (R + ratio I)``; returns (nll, beta, sigma2, L, jitter)."""
    n = y.shape[0]
    A = R + ratio * np.eye(n)
    L, jitter = _cholesky(A, 1.0)
    beta, resid, alpha, _ = _gls(L, y)
    quad = float(resid @ alpha)
    sigma2 = max(quad / n, variance_floor)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    nll = 0.5 * n * math.log(sigma2) + 0.5 * logdet + 0.5 * quad / sigma2 + 0.5 * n * _LOG_2PI
    return nll, beta, sigma2, L, jitter


def _full_nll(R, y, sigma2, nugget):
    """NLL for ``C = sigma2 R + diag(nugget)`` with GLS trend; returns (nll, beta, L, jitter)."""
    n = y.shape[0]
    C = sigma2 * R
    C[np.diag_indices_from(C)] += nugget
    L, jitter = _cholesky(C, sigma2)
    beta, resid, alpha, _ = _gls(L, y)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    nll = 0.5 * logdet + 0.5 * float(resid @ alpha) + 0.5 * n * _LOG_2PI
    return nll, beta, L, jitter


def negative_log_likelihood(points, outputs, lengthscales, nugget=0.0, process_variance=None,
                            smoothness=2.5, return_info=False):
    """Gaussian negative log-likelihood with the constant trend estimated by GLS.

    If ``process_variance`` is None it is profiled out and ``nugget`` is read
    as the nugget-to-variance ratio (a scalar).  Otherwise ``nugget`` is an
    absolute variance, scalar or one value per point.

    An ill-conditioned covariance yields a large finite penalty instead of an
    exception, so the function is safe inside an optimizer; ``info["ill_conditioned"]``
    flags it when ``return_info`` is set.
    """
    X = as_matrix(points, name="points")
    y = as_vector(outputs, name="outputs")
    if X.shape[0] != y.shape[0]:
        raise InvalidArgumentError("points and outputs differ in length")
    theta = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if theta.size != X.shape[1] or not np.all(theta > 0):
        raise InvalidArgumentError("need one positive lengthscale per input column")
    R = _correlation_from_diffs(_abs_differences(X, X), theta, smoothness)
    info = {"ill_conditioned": False}
    try:
        if process_variance is None:
            if np.ndim(nugget) != 0:
                raise InvalidArgumentError("a profiled variance needs a scalar nugget ratio")
            _check_duplicates(X, np.full(y.shape, float(nugget)))
            nll, beta, sigma2, _, jitter = _profiled_nll(R, y, float(nugget), _variance_floor(y))
        else:
            sigma2 = float(process_variance)
            nug = np.broadcast_to(np.asarray(nugget, dtype=float), y.shape)
            _check_duplicates(X, nug)
            nll, beta, _, jitter = _full_nll(R, y, sigma2, nug)
        info.update(beta=beta, sigma2=sigma2, jitter=jitter)
    except IllConditionedCovarianceError:
        nll = _PENALTY
        info["ill_conditioned"] = True
    return (nll, info) if return_info else nll


def _variance_floor(y):
    var = float(np.var(y))
    return 1e-12 * var if var > 0 else 1e-12


# --- fitting ----------------------------------------------------------------------


@dataclass
class FitTrace:
    """Record of a multi-start likelihood optimization.

    ``starts[0]`` is the supplied warm start when one was given.  NLL values
    are in the standardized-output units used during optimization.
    """

    starts: list = field(default_factory=list)
    start_nll: list = field(default_factory=list)
    final_nll: list = field(default_factory=list)
    n_evals: list = field(default_factory=list)
    best_start: int = 0
    warm_start: bool = False

    @property
    def best_nll(self):
        return self.final_nll[self.best_start]


@dataclass(frozen=True)
class GpModel:
    """A fitted Gaussian process.

    ``points`` are in kernel units (the unit hypercube when input bounds were
    given); ``input_lower`` / ``input_upper`` map raw queries onto them.
    """

    kernel: KernelConfig
    trend: float
    points: np.ndarray
    outputs: np.ndarray
    cholesky_factor: np.ndarray
    alpha_weights: np.ndarray
    log_likelihood: float
    active_inputs: tuple
    input_lower: np.ndarray | None = None
    input_upper: np.ndarray | None = None
    jitter: float = 0.0
    nugget_mode: str = "estimate"
    trace: FitTrace | None = field(default=None, compare=False)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def covariance(self):
        return self.cholesky_factor @ self.cholesky_factor.T

    def to_kernel_units(self, X):
        X = as_matrix(X, name="query")
        if X.shape[1] != self.d:
            raise InvalidArgumentError(f"query has {X.shape[1]} columns, model expects {self.d}")
        if self.input_lower is None:
            return X
        return (X - self.input_lower) / (self.input_upper - self.input_lower)

    def hyperparameters(self):
        """Warm-start payload for a later fit."""
        kernel = self.kernel
        return {
            "lengthscales": kernel.lengthscales.copy(),
            "process_variance": kernel.process_variance,
            "nugget": None if kernel.heteroscedastic else kernel.nugget,
        }


class _PairCorrelation:
    """Training-set correlation evaluated on the strict upper triangle only."""

    def __init__(self, X, smoothness):
        n = X.shape[0]
        self.n = n
        self.rows, self.cols = np.triu_indices(n, k=1)
        self.diffs = np.abs(X[self.rows] - X[self.cols]).T.copy()
        self.smoothness = float(smoothness)
        _matern(smoothness)

    def __call__(self, lengthscales):
        if self.smoothness == 2.5:
            s = (math.sqrt(5.0) / lengthscales)[:, None] * self.diffs
            poly = np.prod(1.0 + s + s * s / 3.0, axis=0)
        else:
            s = (math.sqrt(3.0) / lengthscales)[:, None] * self.diffs
            poly = np.prod(1.0 + s, axis=0)
        values = poly * np.exp(-s.sum(axis=0))
        R = np.empty((self.n, self.n))
        R[self.rows, self.cols] = values
        R[self.cols, self.rows] = values
        R[np.diag_indices(self.n)] = 1.0
        return R


class _Problem:
    """Standardized-output likelihood over log-hyperparameters."""

    def __init__(self, X, y, mode, fixed_nugget, smoothness, lengthscale_bounds):
        self.X = X
        self.corr = _PairCorrelation(X, smoothness)
        self.y_mean = float(y.mean())
        sd = float(y.std())
        self.y_scale = sd if sd > 0 else 1.0
        self.y = (y - self.y_mean) / self.y_scale
        self.mode = mode
        self.smoothness = smoothness
        self.d = X.shape[1]
        self.n = X.shape[0]
        self.floor = _variance_floor(self.y)
        if mode == "fixed":
            self.nugget = fixed_nugget / self.y_scale**2
            self.profiled = not np.any(self.nugget > 0)
        else:
            self.nugget = None
            self.profiled = True
        lo, hi = np.log(lengthscale_bounds)
        bounds = [(lo, hi)] * self.d
        if mode == "estimate":
            bounds.append(tuple(np.log(NUGGET_RATIO_BOUNDS)))
        elif not self.profiled:
            bounds.append(tuple(np.log(VARIANCE_BOUNDS)))
        self.bounds = np.array(bounds)
        self.evals = 0

    @property
    def n_params(self):
        return len(self.bounds)

    def encode(self, theta, extra):
        p = np.log(np.asarray(theta, dtype=float))
        if self.n_params > self.d:
            p = np.append(p, math.log(extra))
        return np.clip(p, self.bounds[:, 0], self.bounds[:, 1])

    def nll(self, p):
        self.evals += 1
        R = self.corr(np.exp(p[: self.d]))
        try:
            if self.mode == "estimate":
                return _profiled_nll(R, self.y, math.exp(p[self.d]), self.floor)[0]
            if self.profiled:
                return _profiled_nll(R, self.y, 0.0, self.floor)[0]
            return _full_nll(R, self.y, math.exp(p[self.d]), self.nugget)[0]
        except IllConditionedCovarianceError:
            return _PENALTY

    def natural(self, p):
        """(lengthscales, sigma2, absolute nugget) in original output units."""
        theta = np.exp(p[: self.d])
        R = self.corr(theta)
        s2 = self.y_scale**2
        if self.mode == "estimate":
            ratio = math.exp(p[self.d])
            sigma2 = _profiled_nll(R, self.y, ratio, self.floor)[2]
            return theta, sigma2 * s2, ratio * sigma2 * s2
        if self.profiled:
            sigma2 = _profiled_nll(R, self.y, 0.0, self.floor)[2]
            return theta, sigma2 * s2, self.nugget * s2
        return theta, math.exp(p[self.d]) * s2, self.nugget * s2


def _initial_simplex(x0, bounds, step=0.5):
    simplex = [x0]
    for i in range(x0.size):
        x = x0.copy()
        x[i] = x[i] + step if x[i] + step <= bounds[i, 1] else x[i] - step
        simplex.append(x)
    return np.array(simplex)


def _random_starts(problem, count, anchor, rng_seed):
    """Starts spread by greedy maximin selection from an LHS pool in log space."""
    if count <= 0:
        return []
    scale = math.sqrt(problem.d)
    box = [(math.log(0.05 * scale), math.log(2.0 * scale))] * problem.d
    if problem.mode == "estimate":
        box.append((math.log(1e-6), math.log(1e-1)))
    elif not problem.profiled:
        box.append((math.log(0.05), math.log(2.0)))
    box = np.clip(np.array(box), problem.bounds[:, [0]], problem.bounds[:, [1]])
    pool_size = max(10 * count, 2)
    pool = lhs_sample(problem.n_params, pool_size, seed=rng_seed).points
    pool = box[:, 0] + pool * (box[:, 1] - box[:, 0])
    width = box[:, 1] - box[:, 0]
    width[width == 0] = 1.0
    chosen = [anchor]
    picked = []
    for _ in range(count):
        dist = np.min(
            [np.linalg.norm((pool - c) / width, axis=1) for c in chosen], axis=0
        )
        idx = int(np.argmax(dist))
        picked.append(pool[idx])
        chosen.append(pool[idx])
        pool = np.delete(pool, idx, axis=0)
    return picked


def _default_threads():
    value = os.environ.get("HIDIM_THREADS")
    try:
        return max(1, int(value)) if value else 1
    except ValueError:
        return 1


def fit_gp(points, outputs, init=None, nugget="estimate", *, init_nugget=None,
           init_variance=None, n_starts=5, max_evals=None, random_state=0,
           input_bounds=None, active_inputs=None, smoothness=2.5,
           lengthscale_bounds=LENGTHSCALE_BOUNDS, n_jobs=None):
    """Fit a constant-trend Matern GP by maximum likelihood.

    Parameters
    ----------
    points : array of shape (n, d)
    outputs : array of shape (n,)
    init : array of shape (d,), optional
        Warm-start lengthscales (kernel units), used verbatim as the first start.
    nugget : "estimate", float or array of shape (n,)
        ``"estimate"`` fits a homoscedastic nugget.  A number or vector is a
        fixed absolute nugget (heteroscedastic when a vector).
    init_nugget, init_variance : float, optional
        Absolute nugget and process variance accompanying ``init``.
    n_starts : int
        Total optimizer starts, the warm start included.
    max_evals : int, optional
        Likelihood evaluations allowed per start; defaults to ``200 * (p + 1)``
        for ``p`` free parameters.
    input_bounds : (lower, upper), optional
        Raw input bounds; points are mapped to the unit hypercube before the
        kernel sees them, and lengthscales are then in unit-cube units.
    """
    X = as_matrix(points, name="points", min_samples=2)
    y = as_vector(outputs, name="outputs")
    if X.shape[0] != y.shape[0]:
        raise InvalidArgumentError("points and outputs differ in length")
    n, d = X.shape
    if n < d + 2:
        raise InvalidArgumentError(f"need at least {d + 2} points for {d} inputs, got {n}")
    if n_starts < 1:
        raise InvalidArgumentError("n_starts must be >= 1")
    lower = upper = None
    if input_bounds is not None:
        lower = np.asarray(input_bounds[0], dtype=float).reshape(d)
        upper = np.asarray(input_bounds[1], dtype=float).reshape(d)
        if not np.all(upper > lower):
            raise InvalidArgumentError("input bounds need lower < upper")
        X = (X - lower) / (upper - lower)

    if isinstance(nugget, str):
        if nugget != "estimate":
            raise InvalidArgumentError(f"unknown nugget mode {nugget!r}")
        mode, fixed = "estimate", None
    else:
        fixed = np.broadcast_to(np.asarray(nugget, dtype=float), (n,)).copy()
        if np.any(fixed < 0) or not np.all(np.isfinite(fixed)):
            raise InvalidArgumentError("nugget entries must be finite and nonnegative")
        mode = "fixed"
        _check_duplicates(X, fixed)
    problem = _Problem(X, y, mode, fixed, smoothness, lengthscale_bounds)
    budget = int(max_evals) if max_evals else 200 * (problem.n_params + 1)

    trace = FitTrace()
    if init is not None:
        theta0 = np.atleast_1d(np.asarray(init, dtype=float)).copy()
        if theta0.shape != (d,) or not np.all(theta0 > 0):
            raise InvalidArgumentError(f"init must hold {d} positive lengthscales")
        trace.warm_start = True
    else:
        theta0 = np.full(d, 0.5 * math.sqrt(d))
    s2 = problem.y_scale**2
    if mode == "estimate":
        if init_nugget is not None and init_variance:
            extra = max(init_nugget / init_variance, NUGGET_RATIO_BOUNDS[0])
        else:
            extra = 1e-3
    elif problem.profiled:
        extra = None
    else:
        extra = init_variance / s2 if init_variance else max(1.0 - float(problem.nugget.mean()), 0.05)
    starts = [problem.encode(theta0, extra)]
    trace.starts.append(theta0)
    for p in _random_starts(problem, n_starts - 1, starts[0], random_state):
        starts.append(p)
        trace.starts.append(np.exp(p[:d]))

    def run(x0):
        options = {"maxfev": budget, "xatol": 1e-3, "fatol": 1e-6,
                   "adaptive": problem.n_params > 4,
                   "initial_simplex": _initial_simplex(x0, problem.bounds)}
        local = _Problem.__new__(_Problem)
        local.__dict__.update(problem.__dict__)
        local.evals = 0
        f0 = local.nll(x0)
        res = minimize(local.nll, x0, method="Nelder-Mead",
                       bounds=[tuple(b) for b in problem.bounds], options=options)
        x, f = (res.x, float(res.fun)) if res.fun <= f0 else (x0, f0)
        return x, f, f0, local.evals

    workers = n_jobs or _default_threads()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, starts))
    else:
        outcomes = [run(x0) for x0 in starts]

    for _, f, f0, evals in outcomes:
        trace.start_nll.append(f0)
        trace.final_nll.append(f)
        trace.n_evals.append(evals)
    finals = np.array(trace.final_nll)
    if np.all(finals >= _PENALTY):
        raise IllConditionedCovarianceError("covariance could not be factorized at any start")
    trace.best_start = int(np.argmin(finals))  # argmin keeps the lowest index on ties
    best = outcomes[trace.best_start][0]

    theta, sigma2, nug = problem.natural(best)
    # a fixed nugget is kept verbatim rather than round-tripped through the output scaling
    kernel = KernelConfig(theta, sigma2, fixed if mode == "fixed" else float(nug), smoothness)
    model = _assemble(X, y, kernel, active_inputs, lower, upper, mode, trace)
    logger.debug("fit_gp: best start %d of %d, nll %.6g", trace.best_start, len(starts), trace.best_nll)
    return model


def _assemble(X, y, kernel, active_inputs, lower, upper, mode, trace=None):
    n = X.shape[0]
    C = kernel.process_variance * correlation_matrix(X, X, kernel.lengthscales, kernel.smoothness)
    C[np.diag_indices_from(C)] += kernel.nugget_vector(n)
    L, jitter = _cholesky(C, kernel.process_variance)
    beta, resid, alpha, _ = _gls(L, y)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    loglik = -(0.5 * logdet + 0.5 * float(resid @ alpha) + 0.5 * n * _LOG_2PI)
    active = tuple(range(X.shape[1])) if active_inputs is None else tuple(int(i) for i in active_inputs)
    if len(active) != X.shape[1]:
        raise InvalidArgumentError("active_inputs must name one input per column")
    return GpModel(
        kernel=kernel, trend=beta, points=X, outputs=y, cholesky_factor=L,
        alpha_weights=alpha, log_likelihood=loglik, active_inputs=active,
        input_lower=lower, input_upper=upper, jitter=jitter, nugget_mode=mode, trace=trace,
    )


def build_model(points, outputs, kernel, active_inputs=None, input_bounds=None):
    """Condition a GP with given hyperparameters on data (no optimization)."""
    X = as_matrix(points, name="points")
    y = as_vector(outputs, name="outputs")
    lower = upper = None
    if input_bounds is not None:
        lower = np.asarray(input_bounds[0], dtype=float).reshape(X.shape[1])
        upper = np.asarray(input_bounds[1], dtype=float).reshape(X.shape[1])
        X = (X - lower) / (upper - lower)
    _check_duplicates(X, kernel.nugget_vector(X.shape[0]))
    mode = "fixed" if kernel.heteroscedastic else "estimate"
    return _assemble(X, y, kernel, active_inputs, lower, upper, mode)


# --- prediction -------------------------------------------------------------------


def gp_predict(model, query):
    """Kriging mean and variance of the latent process at ``query``.

    The variance includes the trend-estimation term and excludes the nugget;
    it is clamped at zero against roundoff.
    """
    Q = model.to_kernel_units(query)
    k = model.kernel
    c = k.process_variance * correlation_matrix(model.points, Q, k.lengthscales, k.smoothness)
    mean = model.trend + c.T @ model.alpha_weights
    L = model.cholesky_factor
    V = solve_triangular(L, c, lower=True, check_finite=False)
    w = solve_triangular(L, np.ones(model.n), lower=True, check_finite=False)
    trend_term = (1.0 - w @ V) ** 2 / (w @ w)
    var = k.process_variance - np.sum(V * V, axis=0) + trend_term
    return mean, np.maximum(var, 0.0)


def loo_predictions(model):
    """Closed-form leave-one-out means and latent variances (hyperparameters fixed).

    Uses ``Q = C^-1 - C^-1 1 1^T C^-1 / (1^T C^-1 1)``, which also re-estimates the
    constant trend without the left-out point: the LOO residual is
    ``(Q y)_i / Q_ii`` and the LOO variance of the observation is ``1 / Q_ii``.
    """
    L = model.cholesky_factor
    n = model.n
    Cinv = cho_solve((L, True), np.eye(n), check_finite=False)
    u = Cinv.sum(axis=1)
    Qdiag = np.diag(Cinv) - u**2 / u.sum()
    means = model.outputs - model.alpha_weights / Qdiag
    variances = 1.0 / Qdiag - model.kernel.nugget_vector(n) - model.jitter * model.kernel.process_variance
    return means, np.maximum(variances, 0.0)


# --- persistence ------------------------------------------------------------------


def data_hash(points, outputs):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(points, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(outputs, dtype="<f8").tobytes())
    return h.hexdigest()


def model_to_dict(model):
    k = model.kernel
    raw = model.points
    if model.input_lower is not None:
        raw = model.input_lower + model.points * (model.input_upper - model.input_lower)
    return {
        "format": "hidim-gp",
        "version": FORMAT_VERSION,
        "kernel": {
            "lengthscales": k.lengthscales.tolist(),
            "process_variance": k.process_variance,
            "nugget": k.nugget.tolist() if k.heteroscedastic else k.nugget,
            "smoothness": k.smoothness,
        },
        "trend": model.trend,
        "log_likelihood": model.log_likelihood,
        "nugget_mode": model.nugget_mode,
        "active_inputs": list(model.active_inputs),
        "input_lower": None if model.input_lower is None else model.input_lower.tolist(),
        "input_upper": None if model.input_upper is None else model.input_upper.tolist(),
        "points": raw.tolist(),
        "outputs": model.outputs.tolist(),
        "data_sha256": data_hash(raw, model.outputs),
    }


def model_from_dict(payload, data=None):
    if payload.get("format") != "hidim-gp":
        raise InvalidArgumentError("not a hidim GP model file")
    if payload.get("version") != FORMAT_VERSION:
        raise InvalidArgumentError(f"unsupported model version {payload.get('version')}")
    raw = np.asarray(payload["points"], dtype=float)
    y = np.asarray(payload["outputs"], dtype=float)
    expected = payload["data_sha256"]
    if data_hash(raw, y) != expected:
        raise InvalidArgumentError("stored training data does not match its hash")
    if data is not None and data_hash(np.asarray(data[0], dtype=float), np.asarray(data[1], dtype=float)) != expected:
        raise InvalidArgumentError("supplied training data does not match the model's data hash")
    kp = payload["kernel"]
    nugget = kp["nugget"]
    kernel = KernelConfig(
        np.asarray(kp["lengthscales"]), kp["process_variance"],
        np.asarray(nugget) if isinstance(nugget, list) else nugget, kp["smoothness"],
    )
    bounds = None
    if payload["input_lower"] is not None:
        bounds = (np.asarray(payload["input_lower"]), np.asarray(payload["input_upper"]))
    model = build_model(raw, y, kernel, payload["active_inputs"], bounds)
    object.__setattr__(model, "nugget_mode", payload["nugget_mode"])
    return model


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path, data=None):
    """Load a model; ``data=(points, outputs)`` must match the stored data hash."""
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh), data)


# --- estimator --------------------------------------------------------------------


class GaussianProcessModel(RegressorMixin, BaseEstimator):
    """Constant-trend Matern GP regressor fitted by maximum likelihood.

    Parameters
    ----------
    nugget : "estimate", float or array, default="estimate"
    n_starts : int, default=5
    max_evals : int or None
        Per-start likelihood-evaluation budget.
    init_lengthscales : array or None
        Warm start.
    input_bounds : (lower, upper) or None
        Raw input bounds used to standardize inputs; None uses the data range.
    random_state : int, default=0
    smoothness : {1.5, 2.5}, default=2.5
    n_jobs : int or None
        Threads for the multi-start; None reads ``HIDIM_THREADS``.

    Attributes
    ----------
    model_ : GpModel
    """

    def __init__(self, nugget="estimate", n_starts=5, max_evals=None, init_lengthscales=None,
                 input_bounds=None, random_state=0, smoothness=2.5, n_jobs=None):
        self.nugget = nugget
        self.n_starts = n_starts
        self.max_evals = max_evals
        self.init_lengthscales = init_lengthscales
        self.input_bounds = input_bounds
        self.random_state = random_state
        self.smoothness = smoothness
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        bounds = self.input_bounds
        if bounds is None:
            lo, hi = X.min(axis=0), X.max(axis=0)
            bounds = (lo, np.where(hi > lo, hi, lo + 1.0))
        self.model_ = fit_gp(
            X, y, init=self.init_lengthscales, nugget=self.nugget, n_starts=self.n_starts,
            max_evals=self.max_evals, random_state=self.random_state, input_bounds=bounds,
            smoothness=self.smoothness, n_jobs=self.n_jobs,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_var=False):
        check_is_fitted(self, "model_")
        mean, var = gp_predict(self.model_, X)
        return (mean, var) if return_var else mean

    def loo_predict(self, return_var=False):
        check_is_fitted(self, "model_")
        mean, var = loo_predictions(self.model_)
        return (mean, var) if return_var else mean
