"""Exception hierarchy shared by all modules."""

import numpy as np


class HidimError(Exception):
    """Base class for errors raised by hidim."""


class InvalidArgumentError(HidimError, ValueError):
    """An argument is outside the operation's domain."""


class DegenerateInputError(HidimError, ValueError):
    """Data has no variability where some is required (constant column, zero bandwidth)."""


class IllConditionedCovarianceError(HidimError, np.linalg.LinAlgError):
    """Cholesky factorization failed even after jitter escalation."""


class SchemaError(HidimError, ValueError):
    """A tabular file does not have the expected columns."""
