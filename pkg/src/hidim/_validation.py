"""Small input-validation helpers on top of sklearn's."""

import numpy as np
from sklearn.utils import check_array

from ._exceptions import InvalidArgumentError


def as_matrix(X, name="X", min_samples=1):
    """Return ``X`` as a 2-D float array, promoting 1-D input to a column."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    try:
        return check_array(X, ensure_min_samples=min_samples, input_name=name)
    except ValueError as exc:
        raise InvalidArgumentError(str(exc)) from exc


def as_vector(y, name="y", min_samples=1):
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        y = y.ravel() if y.ndim == 2 and 1 in y.shape else y
    if y.ndim != 1:
        raise InvalidArgumentError(f"{name} must be one-dimensional, got shape {y.shape}")
    if y.shape[0] < min_samples:
        raise InvalidArgumentError(f"{name} needs at least {min_samples} values, got {y.shape[0]}")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError(f"{name} contains NaN or infinite values")
    return y


def check_probability(value, name, open_interval=True):
    value = float(value)
    ok = 0.0 < value < 1.0 if open_interval else 0.0 <= value <= 1.0
    if not ok:
        raise InvalidArgumentError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise InvalidArgumentError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
