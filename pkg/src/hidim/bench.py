"""Analytic test functions with known sensitivity structure.

All functions take a point or an ``(n, d)`` batch and return a scalar or an
``(n,)`` array.  :data:`BENCHMARKS` maps CLI names to :class:`BenchFunction`
records carrying bounds and, where known, analytic Sobol indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._exceptions import InvalidArgumentError
from .design import InputSpec, unit_inputs

__all__ = [
    "BenchFunction",
    "BENCHMARKS",
    "G27_COEFFICIENTS",
    "g_function",
    "g_function_gradient",
    "g_function_sobol",
    "ishigami",
    "ishigami_gradient",
    "ishigami_variance",
    "ishigami_sobol",
    "linear",
    "linear_gradient",
    "hetero_testcase",
    "hetero_conditional_variance",
    "hetero_conditional_mean",
    "get_benchmark",
]


def _batch(x):
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x, x.ndim == 1


def _unbatch(values, single):
    return float(values[0]) if single else values


# --- Sobol g-function -------------------------------------------------------

# 4 dominant, 3 moderate and 20 practically inert inputs; the dominant
# coefficients are close enough that all four stand out of HSIC noise at n = 270
G27_COEFFICIENTS = np.array([0.5, 0.8, 0.8, 1.0, 4.0, 6.0, 6.0] + [99.0] * 20)


def _check_a(a, d):
    a = np.asarray(a, dtype=float)
    if a.shape != (d,):
        raise InvalidArgumentError(f"expected {d} coefficients, got shape {a.shape}")
    if np.any(a < 0):
        raise InvalidArgumentError("g-function coefficients must be nonnegative")
    return a


def g_function(x, a):
    """Sobol g-function ``prod_k (|4 x_k - 2| + a_k) / (1 + a_k)``."""
    X, single = _batch(x)
    a = _check_a(a, X.shape[1])
    return _unbatch(np.prod((np.abs(4.0 * X - 2.0) + a) / (1.0 + a), axis=1), single)


def g_function_gradient(x, a):
    X, single = _batch(x)
    a = _check_a(a, X.shape[1])
    factors = (np.abs(4.0 * X - 2.0) + a) / (1.0 + a)
    slopes = 4.0 * np.sign(4.0 * X - 2.0) / (1.0 + a)
    grads = np.empty_like(X)
    for k in range(X.shape[1]):
        grads[:, k] = slopes[:, k] * np.prod(np.delete(factors, k, axis=1), axis=1)
    return grads[0] if single else grads


def g_function_sobol(a):
    """Analytic first-order and total Sobol indices and the output variance."""
    a = np.asarray(a, dtype=float)
    partial = (1.0 / 3.0) / (1.0 + a) ** 2
    variance = np.prod(1.0 + partial) - 1.0
    first = partial / variance
    total = np.array([
        partial[k] * np.prod(np.delete(1.0 + partial, k)) for k in range(a.size)
    ]) / variance
    return first, total, variance


# --- Ishigami ----------------------------------------------------------------

def ishigami(x, a=7.0, b=0.1):
    X, single = _batch(x)
    if X.shape[1] != 3:
        raise InvalidArgumentError("the Ishigami function has 3 inputs")
    x1, x2, x3 = X.T
    return _unbatch(np.sin(x1) + a * np.sin(x2) ** 2 + b * x3**4 * np.sin(x1), single)


def ishigami_gradient(x, a=7.0, b=0.1):
    X, single = _batch(x)
    x1, x2, x3 = X.T
    grads = np.column_stack([
        np.cos(x1) * (1.0 + b * x3**4),
        2.0 * a * np.sin(x2) * np.cos(x2),
        4.0 * b * x3**3 * np.sin(x1),
    ])
    return grads[0] if single else grads


def ishigami_variance(a=7.0, b=0.1):
    return a**2 / 8.0 + b * np.pi**4 / 5.0 + b**2 * np.pi**8 / 18.0 + 0.5


def ishigami_sobol(a=7.0, b=0.1):
    var = ishigami_variance(a, b)
    v1 = 0.5 * (1.0 + b * np.pi**4 / 5.0) ** 2
    v2 = a**2 / 8.0
    v13 = b**2 * np.pi**8 * (1.0 / 18.0 - 1.0 / 50.0)
    first = np.array([v1, v2, 0.0]) / var
    total = np.array([v1 + v13, v2, v13]) / var
    return first, total, var


# --- linear ------------------------------------------------------------------

LINEAR_COEFFICIENTS = np.array([1.0, 2.0])


def linear(x, coefficients=LINEAR_COEFFICIENTS):
    X, single = _batch(x)
    return _unbatch(X @ np.asarray(coefficients, dtype=float), single)


def linear_gradient(x, coefficients=LINEAR_COEFFICIENTS):
    X, single = _batch(x)
    grads = np.broadcast_to(np.asarray(coefficients, dtype=float), X.shape).copy()
    return grads[0] if single else grads


def linear_sobol(coefficients=LINEAR_COEFFICIENTS):
    """Sobol indices for uniform inputs on [0, 1]; additive, so first = total."""
    parts = np.asarray(coefficients, dtype=float) ** 2 / 12.0
    return parts / parts.sum(), parts / parts.sum(), parts.sum()


# --- heteroscedastic test case ----------------------------------------------

# moments of sin(7 u + 3 v) for u, v ~ U[0, 1], integrated in closed form
_PHASE_MEAN = (np.sin(3.0) + np.sin(7.0) - np.sin(10.0)) / 21.0
_PHASE_MEAN_SQ = 0.5 - (np.cos(14.0) - np.cos(20.0) + np.cos(6.0) - 1.0) / 168.0
PHASE_VARIANCE = _PHASE_MEAN_SQ - _PHASE_MEAN**2


def hetero_testcase(x):
    """``sin(2 pi x1) + x2^2 + (0.05 + 0.3 x1) sin(7 x3 + 3 x4)``; extra inputs are inert."""
    X, single = _batch(x)
    if X.shape[1] < 4:
        raise InvalidArgumentError("hetero_testcase needs at least 4 inputs")
    x1, x2, x3, x4 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    values = np.sin(2 * np.pi * x1) + x2**2 + (0.05 + 0.3 * x1) * np.sin(7 * x3 + 3 * x4)
    return _unbatch(values, single)


def hetero_conditional_variance(x1):
    """``Var(Y | x1, x2)`` with ``x3, x4`` uniform on [0, 1]."""
    x1 = np.asarray(x1, dtype=float)
    return (0.05 + 0.3 * x1) ** 2 * PHASE_VARIANCE


def hetero_conditional_mean(x1, x2):
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return np.sin(2 * np.pi * x1) + x2**2 + (0.05 + 0.3 * x1) * _PHASE_MEAN


# --- registry ----------------------------------------------------------------

@dataclass(frozen=True)
class BenchFunction:
    name: str
    dimension: int
    bounds: list
    function: Callable
    gradient: Callable | None = None
    first_order: np.ndarray | None = None
    total: np.ndarray | None = None
    variance: float | None = None

    @property
    def analytic_gradient(self):
        return self.gradient is not None

    def __call__(self, x):
        return self.function(x)


def _g(name, a):
    first, total, var = g_function_sobol(a)
    return BenchFunction(
        name, a.size, unit_inputs(a.size),
        lambda x, a=a: g_function(x, a), lambda x, a=a: g_function_gradient(x, a),
        first, total, var,
    )


def _make_registry():
    registry = {}
    registry["g27"] = _g("g27", G27_COEFFICIENTS)
    registry["g15"] = _g("g15", np.array([0.0] * 4 + [9.0] * 11))
    first, total, var = ishigami_sobol()
    registry["ishigami"] = BenchFunction(
        "ishigami", 3, [InputSpec(f"x{k + 1}", -np.pi, np.pi) for k in range(3)],
        ishigami, ishigami_gradient, first, total, var,
    )
    first, total, var = linear_sobol()
    registry["linear"] = BenchFunction(
        "linear", 2, unit_inputs(2), linear, linear_gradient, first, total, var,
    )
    registry["hetero"] = BenchFunction("hetero", 6, unit_inputs(6), hetero_testcase)
    return registry


BENCHMARKS = _make_registry()


def get_benchmark(name):
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown benchmark {name!r}; available: {', '.join(sorted(BENCHMARKS))}"
        ) from None
