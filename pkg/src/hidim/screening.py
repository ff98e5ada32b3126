"""Input screening with HSIC dependence measures and DGSM.

HSIC uses Gaussian kernels whose bandwidth is the empirical standard deviation
(``ddof=1``) of the variable, and the biased V-statistic estimator
``trace(K H L H) / n**2``.  Independence of each input and the output is tested
either by permutation or by the moment-matched Gamma approximation of the null
distribution of ``n * HSIC``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from ._exceptions import DegenerateInputError, InvalidArgumentError
from ._validation import as_matrix, as_vector, check_positive_int, check_probability
from .design import InputSpec, LearningSample

__all__ = [
    "TEST_KINDS",
    "HsicResult",
    "ScreeningReport",
    "DgsmResult",
    "SmallSampleWarning",
    "gaussian_gram",
    "hsic_v_statistic",
    "hsic",
    "r2_hsic",
    "hsic_permutation_test",
    "hsic_gamma_test",
    "screen_inputs",
    "HSICScreener",
    "dgsm_estimate",
    "poincare_total_sobol_bound",
    "dgsm_screen",
    "finite_difference_gradients",
    "read_screening_csv",
]

TEST_KINDS = ("gamma", "permutation")
_MIN_GAMMA_N = 20


class SmallSampleWarning(UserWarning):
    """The asymptotic Gamma test is unreliable at this sample size."""


def gaussian_gram(values):
    """Gram matrix ``exp(-(u - v)^2 / (2 s^2))`` with ``s`` the sample std of ``values``."""
    values = as_vector(values, name="values", min_samples=2)
    s2 = values.var(ddof=1)
    if not s2 > 0.0:
        raise DegenerateInputError("constant values give a zero kernel bandwidth")
    diff = values[:, None] - values[None, :]
    return np.exp(-(diff**2) / (2.0 * s2))


def _center(K):
    """``H K H`` without forming ``H``."""
    row = K.mean(axis=0)
    return K - row[None, :] - row[:, None] + row.mean()


def hsic_v_statistic(K, L):
    """Biased HSIC estimate ``trace(K H L H) / n^2`` from two Gram matrices."""
    K = np.asarray(K, dtype=float)
    L = np.asarray(L, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InvalidArgumentError(f"Gram matrix must be square, got shape {K.shape}")
    if K.shape != L.shape:
        raise InvalidArgumentError(f"Gram matrices differ in size: {K.shape} vs {L.shape}")
    n = K.shape[0]
    value = float(np.sum(_center(K) * L)) / n**2
    return max(value, 0.0)


def hsic(x, y):
    return hsic_v_statistic(gaussian_gram(x), gaussian_gram(y))


def _r2_from_grams(K, L):
    Kc, Lc = _center(K), _center(L)
    hxy = np.sum(Kc * Lc)
    hxx = np.sum(Kc * Kc)
    hyy = np.sum(Lc * Lc)
    return float(np.clip(hxy / np.sqrt(hxx * hyy), 0.0, 1.0))


def r2_hsic(x, y):
    """Normalized HSIC, ``HSIC(x, y) / sqrt(HSIC(x, x) HSIC(y, y))``."""
    x = as_vector(x, name="x", min_samples=2)
    y = as_vector(y, name="y", min_samples=2)
    if x.shape != y.shape:
        raise InvalidArgumentError("x and y must have the same length")
    return _r2_from_grams(gaussian_gram(x), gaussian_gram(y))


def _permutation_pvalue(Kc, L, n_permutations, seed):
    n = L.shape[0]
    observed = np.sum(Kc * L)
    # one child stream per replicate, so results do not depend on evaluation order
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(n_permutations)
    exceed = 0
    for child in children:
        perm = np.random.default_rng(child).permutation(n)
        if np.sum(Kc * L[np.ix_(perm, perm)]) >= observed:
            exceed += 1
    return (1.0 + exceed) / (n_permutations + 1.0)


def hsic_permutation_test(x, y, n_permutations=999, seed=None):
    """Permutation p-value of the HSIC independence test.

    ``p = (1 + #{b : HSIC(x, y_b) >= HSIC(x, y)}) / (B + 1)`` over ``B``
    seeded permutations ``y_b`` of ``y``.
    """
    if isinstance(n_permutations, bool) or int(n_permutations) != n_permutations or n_permutations < 1:
        raise InvalidArgumentError(f"number of permutations must be >= 1, got {n_permutations!r}")
    x = as_vector(x, name="x", min_samples=2)
    y = as_vector(y, name="y", min_samples=2)
    if x.shape != y.shape:
        raise InvalidArgumentError("x and y must have the same length")
    return _permutation_pvalue(_center(gaussian_gram(x)), gaussian_gram(y), int(n_permutations), seed)


def _gamma_pvalue(K, L):
    n = K.shape[0]
    Kc, Lc = _center(K), _center(L)
    statistic = np.sum(Kc * Lc) / n

    B = (Kc * Lc / 6.0) ** 2
    var = (B.sum() - np.trace(B)) / (n * (n - 1))
    var *= 72.0 * (n - 4) * (n - 5) / (n * (n - 1) * (n - 2) * (n - 3))

    mu_x = (K.sum() - np.trace(K)) / (n * (n - 1))
    mu_y = (L.sum() - np.trace(L)) / (n * (n - 1))
    mean = (1.0 + mu_x * mu_y - mu_x - mu_y) / n
    if not (var > 0.0 and mean > 0.0):
        return 1.0
    shape = mean**2 / var
    scale = n * var / mean
    return float(stats.gamma.sf(statistic, shape, scale=scale))


def hsic_gamma_test(x, y):
    """Asymptotic p-value of the HSIC independence test (Gamma approximation).

    The null distribution of ``n * HSIC`` is approximated by a Gamma law whose
    mean and variance are estimated from the two Gram matrices.  Below 20
    samples a :class:`SmallSampleWarning` is issued.
    """
    x = as_vector(x, name="x", min_samples=2)
    y = as_vector(y, name="y", min_samples=2)
    if x.shape != y.shape:
        raise InvalidArgumentError("x and y must have the same length")
    n = x.shape[0]
    if n < 6:
        raise InvalidArgumentError("the Gamma approximation needs at least 6 samples")
    if n < _MIN_GAMMA_N:
        warnings.warn(
            f"Gamma approximation with n={n} < {_MIN_GAMMA_N} samples is unreliable",
            SmallSampleWarning,
            stacklevel=2,
        )
    return _gamma_pvalue(gaussian_gram(x), gaussian_gram(y))


@dataclass(frozen=True)
class HsicResult:
    input_index: int
    name: str
    hsic: float
    r2_hsic: float
    p_value: float
    test_kind: str
    selected: bool
    degenerate: bool = False


@dataclass(frozen=True)
class ScreeningReport:
    """Per-input HSIC results and the selected inputs by decreasing ``r2_hsic``."""

    results: list
    alpha: float
    test_kind: str
    ordering: list = field(default_factory=list)
    small_sample: bool = False

    @property
    def selected(self):
        return [r.input_index for r in self.results if r.selected]

    @property
    def names(self):
        return [r.name for r in self.results]

    @property
    def ordered_names(self):
        return [self.results[i].name for i in self.ordering]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["input", "hsic", "r2_hsic", "p_value", "selected"])
            for r in self.results:
                writer.writerow([
                    r.name,
                    format(r.hsic, ".17g"),
                    format(r.r2_hsic, ".17g"),
                    format(r.p_value, ".17g"),
                    int(r.selected),
                ])

    def summary(self):
        lines = [
            f"HSIC screening ({self.test_kind} test, alpha = {self.alpha:g}): "
            f"{len(self.ordering)} of {len(self.results)} inputs selected",
        ]
        if self.small_sample:
            lines.append("warning: sample too small for a reliable Gamma approximation")
        lines.append(f"{'rank':>4}  {'input':<16}{'R2_HSIC':>10}{'p-value':>12}")
        for rank, idx in enumerate(self.ordering, start=1):
            r = self.results[idx]
            lines.append(f"{rank:>4}  {r.name:<16}{r.r2_hsic:>10.4f}{r.p_value:>12.3g}")
        degenerate = [r.name for r in self.results if r.degenerate]
        if degenerate:
            lines.append("constant (ignored) inputs: " + ", ".join(degenerate))
        return "\n".join(lines)


def _ordering(results):
    chosen = [r for r in results if r.selected]
    chosen.sort(key=lambda r: (-r.r2_hsic, r.input_index))
    return [r.input_index for r in chosen]


def screen_inputs(sample, alpha=0.1, test_kind="gamma", n_permutations=999, seed=None):
    """Test every input of ``sample`` for dependence with the output.

    Inputs with ``p_value < alpha`` are selected; constant columns are flagged
    degenerate and never selected.  ``seed`` drives the permutation test, each
    input receiving its own derived stream.
    """
    if not isinstance(sample, LearningSample):
        raise InvalidArgumentError("screen_inputs expects a LearningSample")
    alpha = check_probability(alpha, "alpha")
    if test_kind not in TEST_KINDS:
        raise InvalidArgumentError(f"test_kind must be one of {TEST_KINDS}, got {test_kind!r}")
    if test_kind == "permutation":
        check_positive_int(n_permutations, "n_permutations")

    L = gaussian_gram(sample.outputs)
    n = sample.n
    small = test_kind == "gamma" and n < _MIN_GAMMA_N
    if test_kind == "gamma" and n < 6:
        raise InvalidArgumentError("the Gamma approximation needs at least 6 samples")
    input_seeds = np.random.SeedSequence(seed).spawn(sample.d)

    results = []
    for k, name in enumerate(sample.names):
        column = sample.points[:, k]
        try:
            K = gaussian_gram(column)
        except DegenerateInputError:
            results.append(HsicResult(k, name, 0.0, 0.0, 1.0, test_kind, False, degenerate=True))
            continue
        Kc = _center(K)
        value = max(float(np.sum(Kc * L)) / n**2, 0.0)
        r2 = _r2_from_grams(K, L)
        if test_kind == "gamma":
            p = _gamma_pvalue(K, L)
        else:
            p = _permutation_pvalue(Kc, L, int(n_permutations), input_seeds[k])
        results.append(HsicResult(k, name, value, r2, p, test_kind, bool(p < alpha)))
    return ScreeningReport(results, alpha, test_kind, _ordering(results), small_sample=small)


def read_screening_csv(path, alpha=None, test_kind="gamma"):
    """Load a report written by :meth:`ScreeningReport.to_csv`."""
    results = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"input", "hsic", "r2_hsic", "p_value", "selected"}
        if reader.fieldnames is None or not expected <= set(reader.fieldnames):
            raise InvalidArgumentError(f"{path}: screening CSV needs columns {sorted(expected)}")
        for k, row in enumerate(reader):
            results.append(HsicResult(
                k, row["input"], float(row["hsic"]), float(row["r2_hsic"]),
                float(row["p_value"]), test_kind, bool(int(row["selected"])),
            ))
    if alpha is None:
        alpha = float("nan")
    return ScreeningReport(results, alpha, test_kind, _ordering(results))


class HSICScreener(SelectorMixin, BaseEstimator):
    """Select inputs significantly dependent on the output (HSIC test).

    Parameters
    ----------
    alpha : float, default=0.1
        Level of the independence tests.
    test : {"gamma", "permutation"}, default="gamma"
    n_permutations : int, default=999
    random_state : int or None
        Seed of the permutation test.
    input_names : list of str, optional

    Attributes
    ----------
    report_ : ScreeningReport
    r2_hsic_ : ndarray of shape (n_features,)
    p_values_ : ndarray of shape (n_features,)
    ordering_ : list of int
        Selected inputs by decreasing ``r2_hsic``.
    """

    def __init__(self, alpha=0.1, test="gamma", n_permutations=999, random_state=None,
                 input_names=None):
        self.alpha = alpha
        self.test = test
        self.n_permutations = n_permutations
        self.random_state = random_state
        self.input_names = input_names

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True, ensure_min_samples=2)
        names = self.input_names or [f"x{k + 1}" for k in range(X.shape[1])]
        lower, upper = X.min(axis=0), X.max(axis=0)
        # constant columns keep a valid spec; they are caught as degenerate
        upper = np.where(upper > lower, upper, lower + 1.0)
        inputs = [InputSpec(nm, lo, up) for nm, lo, up in zip(names, lower, upper)]
        self.report_ = screen_inputs(
            LearningSample(X, y, inputs), self.alpha, self.test,
            self.n_permutations, self.random_state,
        )
        self.r2_hsic_ = np.array([r.r2_hsic for r in self.report_.results])
        self.p_values_ = np.array([r.p_value for r in self.report_.results])
        self.ordering_ = list(self.report_.ordering)
        self.n_features_in_ = X.shape[1]
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "report_")
        return np.array([r.selected for r in self.report_.results], dtype=bool)


# --- derivative-based measures -------------------------------------------------

@dataclass(frozen=True)
class DgsmResult:
    input_index: int
    nu: float
    poincare_constant: float
    total_sobol_bound: float


def dgsm_estimate(gradients):
    """Mean squared partial derivative per input, ``nu_k = mean_i (dg/dx_k)^2``."""
    G = np.asarray(gradients, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.ndim != 2 or G.shape[0] == 0:
        raise InvalidArgumentError("gradients must be a nonempty (n, d) matrix")
    if not np.all(np.isfinite(G)):
        raise InvalidArgumentError("gradients contain NaN or infinite values")
    return np.mean(G**2, axis=0)


def poincare_constant(spec, distribution="uniform"):
    """Optimal Poincare constant ``((b - a) / pi)^2`` of a uniform input."""
    if distribution != "uniform":
        raise InvalidArgumentError(f"Poincare constant only available for uniform inputs, not {distribution!r}")
    return (spec.width / np.pi) ** 2


def poincare_total_sobol_bound(nu, spec, var_y, distribution="uniform"):
    """Upper bound ``C nu / Var(Y)`` on the total Sobol index of one input."""
    if not var_y > 0:
        raise InvalidArgumentError(f"output variance must be positive, got {var_y}")
    if nu < 0:
        raise InvalidArgumentError(f"DGSM must be nonnegative, got {nu}")
    return poincare_constant(spec, distribution) * float(nu) / float(var_y)


def dgsm_screen(gradients, inputs, var_y):
    nu = dgsm_estimate(gradients)
    if len(inputs) != nu.size:
        raise InvalidArgumentError(f"{len(inputs)} input specs given for {nu.size} gradient columns")
    return [
        DgsmResult(k, float(nu[k]), poincare_constant(spec), poincare_total_sobol_bound(nu[k], spec, var_y))
        for k, spec in enumerate(inputs)
    ]


def finite_difference_gradients(model, points, h=1e-5, inputs=None):
    """Central-difference gradients of a vectorized ``model`` at ``points``.

    Where a point lies within ``h`` of a bound from ``inputs`` a one-sided
    difference is used instead; those entries are flagged in the returned mask.

    Returns
    -------
    gradients : ndarray of shape (n, d)
    one_sided : ndarray of bool, shape (n, d)
    """
    if not h > 0:
        raise InvalidArgumentError(f"step must be positive, got {h}")
    X = as_matrix(points, name="points")
    n, d = X.shape
    if inputs is None:
        lower = np.full(d, -np.inf)
        upper = np.full(d, np.inf)
    else:
        if len(inputs) != d:
            raise InvalidArgumentError(f"{len(inputs)} input specs given for {d} columns")
        lower = np.array([s.lower for s in inputs])
        upper = np.array([s.upper for s in inputs])

    def evaluate(P):
        return np.asarray(model(P), dtype=float).reshape(n)

    grads = np.empty((n, d))
    one_sided = np.zeros((n, d), dtype=bool)
    for k in range(d):
        up_ok = X[:, k] + h <= upper[k]
        down_ok = X[:, k] - h >= lower[k]
        plus, minus = X.copy(), X.copy()
        plus[:, k] = np.where(up_ok, X[:, k] + h, X[:, k])
        minus[:, k] = np.where(down_ok, X[:, k] - h, X[:, k])
        f_plus, f_minus = evaluate(plus), evaluate(minus)
        step = np.where(up_ok, h, 0.0) + np.where(down_ok, h, 0.0)
        if np.any(step == 0):
            raise InvalidArgumentError("interval narrower than the finite-difference step")
        grads[:, k] = (f_plus - f_minus) / step
        one_sided[:, k] = ~(up_ok & down_ok)
    return grads, one_sided
