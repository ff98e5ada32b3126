"""Latin hypercube designs over the unit hypercube.

Designs live in ``[0, 1]^d`` and are mapped to physical units with
:func:`scale_design`.  Space filling is scored by the squared centered L2
discrepancy (Hickernell's closed form), which also drives the simulated
annealing in :func:`optimize_lhs`, and by the maximin distance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import qmc

from ._exceptions import InvalidArgumentError
from ._validation import as_matrix, as_vector

__all__ = [
    "InputSpec",
    "unit_inputs",
    "Design",
    "LearningSample",
    "lhs_sample",
    "centered_l2_discrepancy",
    "maximin_distance",
    "optimize_lhs",
    "is_latin",
    "scale_design",
    "unscale_design",
    "default_sample_size",
    "write_design_csv",
]


@dataclass(frozen=True)
class InputSpec:
    """A named input varying uniformly on ``[lower, upper]``."""

    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise InvalidArgumentError(f"bounds of {self.name!r} must be finite")
        if not self.lower < self.upper:
            raise InvalidArgumentError(
                f"input {self.name!r}: lower ({self.lower}) must be < upper ({self.upper})"
            )

    @property
    def width(self):
        return self.upper - self.lower


def unit_inputs(d, prefix="x"):
    """``d`` inputs named ``x1 .. xd`` on ``[0, 1]``."""
    return [InputSpec(f"{prefix}{k + 1}", 0.0, 1.0) for k in range(d)]


@dataclass(frozen=True)
class Design:
    """An ``n x d`` point set in the unit hypercube.

    ``criterion_value`` is the squared centered L2 discrepancy of ``points``.
    """

    points: np.ndarray
    seed: int | None = None
    criterion_value: float = field(default=float("nan"))

    def __post_init__(self):
        pts = as_matrix(self.points, name="points")
        if np.any(pts < 0.0) or np.any(pts > 1.0):
            raise InvalidArgumentError("design points must lie in [0, 1]")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if math.isnan(self.criterion_value):
            object.__setattr__(self, "criterion_value", centered_l2_discrepancy(pts))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class LearningSample:
    """Simulator runs ``(X_s, Y_s)`` with the inputs' physical bounds.

    ``points`` are in physical units; :attr:`unit_points` maps them back to
    ``[0, 1]^d`` through the bounds.
    """

    points: np.ndarray
    outputs: np.ndarray
    inputs: list

    def __post_init__(self):
        X = as_matrix(self.points, name="points")
        y = as_vector(self.outputs, name="outputs")
        if X.shape[0] != y.shape[0]:
            raise InvalidArgumentError(
                f"outputs length {y.shape[0]} does not match {X.shape[0]} design rows"
            )
        if len(self.inputs) != X.shape[1]:
            raise InvalidArgumentError(
                f"{len(self.inputs)} input specs given for {X.shape[1]} columns"
            )
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "inputs", list(self.inputs))

    @classmethod
    def from_design(cls, design, outputs, inputs):
        return cls(scale_design(design, inputs), outputs, inputs)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def names(self):
        return [spec.name for spec in self.inputs]

    @property
    def unit_points(self):
        return unscale_design(self.points, self.inputs)

    def subset(self, rows):
        return LearningSample(self.points[rows], self.outputs[rows], self.inputs)


def default_sample_size(d):
    """Rule-of-thumb learning-sample size, ten runs per input."""
    return 10 * int(d)


def lhs_sample(d, n, seed=None, centered=False):
    """Draw a Latin hypercube of ``n`` points in ``[0, 1]^d``.

    Each column has exactly one point per stratum ``[i/n, (i+1)/n)``; inside a
    stratum the point is uniform, or at the stratum midpoint when ``centered``.
    """
    if isinstance(d, bool) or int(d) != d or d < 1:
        raise InvalidArgumentError(f"dimension must be >= 1, got {d!r}")
    if isinstance(n, bool) or int(n) != n or n < 2:
        raise InvalidArgumentError(f"sample size must be >= 2, got {n!r}")
    sampler = qmc.LatinHypercube(d=int(d), scramble=not centered, seed=seed)
    points = sampler.random(int(n))
    return Design(points, seed=seed)


def _centered_parts(points):
    """Return (row terms, pairwise product matrix) of the CD^2 formula."""
    z = np.abs(points - 0.5)
    rows = np.prod(1.0 + 0.5 * z - 0.5 * z**2, axis=1)
    n = points.shape[0]
    pair = np.ones((n, n))
    for k in range(points.shape[1]):
        col = points[:, k]
        zk = z[:, k]
        pair *= 1.0 + 0.5 * zk[:, None] + 0.5 * zk[None, :] - 0.5 * np.abs(col[:, None] - col[None, :])
    return rows, pair


def centered_l2_discrepancy(design):
    """Squared centered L2 discrepancy of a point set in ``[0, 1]^d``."""
    points = design.points if isinstance(design, Design) else np.asarray(design, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.size == 0 or points.shape[0] == 0:
        raise InvalidArgumentError("discrepancy of an empty design is undefined")
    n, d = points.shape
    rows, pair = _centered_parts(points)
    value = (13.0 / 12.0) ** d - 2.0 / n * rows.sum() + pair.sum() / n**2
    # roundoff can push a perfect design a hair below zero
    return max(float(value), 0.0)


def maximin_distance(design):
    """Smallest Euclidean distance between two rows."""
    points = design.points if isinstance(design, Design) else as_matrix(design)
    if points.shape[0] < 2:
        raise InvalidArgumentError("maximin distance needs at least two points")
    return float(pdist(points).min())


def is_latin(points):
    """True when every column has exactly one point in each of the n strata."""
    points = points.points if isinstance(points, Design) else np.asarray(points, dtype=float)
    n = points.shape[0]
    strata = np.minimum(np.floor(points * n).astype(int), n - 1)
    target = np.arange(n)
    return all(np.array_equal(np.sort(strata[:, k]), target) for k in range(points.shape[1]))


def _pair_row(points, z, i):
    """Row ``i`` of the pairwise product matrix."""
    return np.prod(
        1.0 + 0.5 * z[i] + 0.5 * z - 0.5 * np.abs(points[i] - points),
        axis=1,
    )


def optimize_lhs(design, budget=1000, seed=None, return_trace=False):
    """Lower the centered L2 discrepancy of a Latin hypercube by annealing.

    Moves swap two entries of one column, so strata occupancy never changes.
    Worse moves are accepted with probability ``exp(-delta / T)`` under a
    geometric cooling schedule; the best design visited is returned, hence
    its discrepancy never exceeds the input's.

    Parameters
    ----------
    design : Design
        Starting Latin hypercube.
    budget : int
        Number of proposed swaps. ``0`` returns ``design`` unchanged.
    seed : int, optional
        Seed of the move generator.
    return_trace : bool
        Also return the best-so-far discrepancy after every proposal.
    """
    if not isinstance(design, Design):
        design = Design(design)
    if isinstance(budget, bool) or int(budget) != budget or budget < 0:
        raise InvalidArgumentError(f"budget must be a nonnegative integer, got {budget!r}")
    if not is_latin(design.points):
        raise InvalidArgumentError("optimize_lhs requires a design with the Latin property")
    budget = int(budget)
    if budget == 0 or design.n < 2:
        return (design, np.array([design.criterion_value])) if return_trace else design

    rng = np.random.default_rng(seed)
    points = np.array(design.points)
    n, d = points.shape
    z = np.abs(points - 0.5)
    rows, pair = _centered_parts(points)
    const = (13.0 / 12.0) ** d
    row_sum, pair_sum = rows.sum(), pair.sum()

    def value(rs, ps):
        return const - 2.0 / n * rs + ps / n**2

    current = value(row_sum, pair_sum)
    best, best_points = current, points.copy()

    def propose():
        k = rng.integers(d)
        i, j = rng.choice(n, size=2, replace=False)
        return k, i, j

    def evaluate(k, i, j):
        points[[i, j], k] = points[[j, i], k]
        z[[i, j], k] = z[[j, i], k]
        new_i, new_j = _pair_row(points, z, i), _pair_row(points, z, j)
        new_rows = np.prod(1.0 + 0.5 * z[[i, j]] - 0.5 * z[[i, j]] ** 2, axis=1)
        old_block = 2.0 * (pair[i].sum() + pair[j].sum()) - (pair[i, i] + pair[j, j] + 2.0 * pair[i, j])
        new_block = 2.0 * (new_i.sum() + new_j.sum()) - (new_i[i] + new_j[j] + 2.0 * new_i[j])
        rs = row_sum - rows[i] - rows[j] + new_rows.sum()
        ps = pair_sum - old_block + new_block
        return rs, ps, new_i, new_j, new_rows

    def undo(k, i, j):
        points[[i, j], k] = points[[j, i], k]
        z[[i, j], k] = z[[j, i], k]

    # initial temperature: median worsening over a short pilot of swaps
    pilot = []
    for _ in range(min(50, budget)):
        k, i, j = propose()
        rs, ps, *_ = evaluate(k, i, j)
        undo(k, i, j)
        delta = value(rs, ps) - current
        if delta > 0:
            pilot.append(delta)
    temperature = float(np.median(pilot)) if pilot else current * 1e-3
    cooling = 1e-3 ** (1.0 / budget)

    trace = np.empty(budget + 1)
    trace[0] = best
    for step in range(budget):
        k, i, j = propose()
        rs, ps, new_i, new_j, new_rows = evaluate(k, i, j)
        candidate = value(rs, ps)
        delta = candidate - current
        if delta <= 0 or (temperature > 0 and rng.random() < math.exp(-delta / temperature)):
            pair[i, :] = new_i
            pair[:, i] = new_i
            pair[j, :] = new_j
            pair[:, j] = new_j
            rows[i], rows[j] = new_rows
            row_sum, pair_sum, current = rs, ps, candidate
            if current < best:
                best, best_points = current, points.copy()
        else:
            undo(k, i, j)
        temperature *= cooling
        trace[step + 1] = best

    result = Design(best_points, seed=design.seed)
    if result.criterion_value > design.criterion_value:
        # incremental sums drifted; never hand back a worse design
        result = design
    return (result, trace) if return_trace else result


def _bounds(inputs, d):
    if len(inputs) != d:
        raise InvalidArgumentError(f"{len(inputs)} input specs given for a {d}-column design")
    lower = np.array([spec.lower for spec in inputs], dtype=float)
    upper = np.array([spec.upper for spec in inputs], dtype=float)
    return lower, upper


def scale_design(design, inputs):
    """Map unit-hypercube points affinely onto the inputs' bounds."""
    points = design.points if isinstance(design, Design) else as_matrix(design)
    lower, upper = _bounds(inputs, points.shape[1])
    return lower + points * (upper - lower)


def unscale_design(points, inputs):
    """Inverse of :func:`scale_design`."""
    points = as_matrix(points)
    lower, upper = _bounds(inputs, points.shape[1])
    return (points - lower) / (upper - lower)


def write_design_csv(path, points, names):
    """Write points with a header row, 17 significant digits per value."""
    points = points.points if isinstance(points, Design) else np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != len(names):
        raise InvalidArgumentError("header length must match the number of columns")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in points:
            writer.writerow([format(float(v), ".17g") for v in row])
