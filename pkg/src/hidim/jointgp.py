"""Joint mean/dispersion GP metamodel and the sequential inclusion loop.

The joint model splits the inputs into explanatory inputs and residual inputs.
Only explanatory inputs enter the regressors; residual inputs act through a
dispersion component, the conditional variance of the output given the
explanatory inputs, estimated from squared residuals.

Fitting runs four stages:

1. ``m1``: GP on ``(X_exp, y)`` with an estimated homoscedastic nugget;
2. ``v1``: GP on the squared residuals of ``m1``'s predictor;
3. ``m2``: GP on ``(X_exp, y)`` with the nugget fixed per point to
   ``max(v1(x_i), floor)``;
4. ``v2``: GP on the squared residuals of ``m2``'s predictor.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from ._exceptions import DegenerateInputError, HidimError, InvalidArgumentError
from ._validation import as_matrix, as_vector
from .design import InputSpec, LearningSample
from .gpcore import fit_gp, gp_predict, load_model, loo_predictions, save_model
from .screening import screen_inputs

logger = logging.getLogger(__name__)

__all__ = [
    "StageRecord",
    "JointGpModel",
    "Q2Report",
    "IterationRecord",
    "BuildTrajectory",
    "fit_joint",
    "joint_predict",
    "dispersion_predict",
    "q2",
    "q2_loo",
    "sequential_build",
    "save_joint_model",
    "load_joint_model",
    "JointGaussianProcess",
    "SequentialJointGP",
]

DEFAULT_FLOOR_FACTOR = 1e-6
STAGES = ("m1", "v1", "m2", "v2")


@dataclass(frozen=True)
class StageRecord:
    stage: str
    log_likelihood: float
    lengthscales: np.ndarray | None
    process_variance: float | None
    nugget: float | np.ndarray | None
    start_nll: float | None = None
    final_nll: float | None = None
    degenerate: bool = False


@dataclass(frozen=True)
class JointGpModel:
    explanatory_inputs: tuple
    residual_inputs: tuple
    inputs: list
    mean_gp: object
    dispersion_gp: object | None
    stage_trace: list
    dispersion_floor: float
    heteroscedastic_nugget: np.ndarray
    first_mean_gp: object = field(default=None, compare=False, repr=False)
    first_dispersion_gp: object = field(default=None, compare=False, repr=False)

    @property
    def degenerate_dispersion(self):
        return self.dispersion_gp is None

    def stage(self, name):
        return next(r for r in self.stage_trace if r.stage == name)

    def warm_start(self):
        """Hyperparameters to seed the next sequential iteration."""
        out = {"mean": self.first_mean_gp.hyperparameters()}
        if self.first_dispersion_gp is not None:
            out["dispersion"] = self.first_dispersion_gp.hyperparameters()
        return out


def _bounds(inputs, idx):
    lower = np.array([inputs[k].lower for k in idx], dtype=float)
    upper = np.array([inputs[k].upper for k in idx], dtype=float)
    return lower, upper


def _record(stage, model, degenerate=False):
    if model is None:
        return StageRecord(stage, float("nan"), None, None, None, degenerate=degenerate)
    k = model.kernel
    trace = model.trace
    return StageRecord(
        stage, model.log_likelihood, k.lengthscales.copy(), k.process_variance,
        k.nugget.copy() if k.heteroscedastic else k.nugget,
        None if trace is None else trace.start_nll[0],
        None if trace is None else trace.best_nll,
        degenerate,
    )


def _init_kwargs(hp):
    if not hp:
        return {}
    return {
        "init": hp["lengthscales"],
        "init_variance": hp.get("process_variance"),
        "init_nugget": hp.get("nugget"),
    }


def fit_joint(sample, explanatory, init=None, *, dispersion_floor_factor=DEFAULT_FLOOR_FACTOR,
              n_starts=5, max_evals=None, random_state=0, n_jobs=None):
    """Fit the four-stage joint GP on ``sample`` with the given explanatory inputs.

    Parameters
    ----------
    sample : LearningSample
    explanatory : sequence of int
        Column indices of the explanatory inputs, in inclusion order.
    init : dict, optional
        ``{"mean": {...}, "dispersion": {...}}`` hyperparameters from
        :meth:`JointGpModel.warm_start`, sized for ``explanatory``.  The mean
        entry seeds stage 1 as its first optimizer start.
    dispersion_floor_factor : float
        Dispersion predictions are clamped at this fraction of ``Var(Y_s)``.
    """
    if not isinstance(sample, LearningSample):
        raise InvalidArgumentError("fit_joint expects a LearningSample")
    explanatory = tuple(int(k) for k in explanatory)
    if not explanatory:
        raise InvalidArgumentError("the explanatory input set is empty")
    if len(set(explanatory)) != len(explanatory) or not all(0 <= k < sample.d for k in explanatory):
        raise InvalidArgumentError(f"invalid explanatory indices {explanatory} for {sample.d} inputs")
    if sample.n < len(explanatory) + 2:
        raise InvalidArgumentError(
            f"need at least {len(explanatory) + 2} runs for {len(explanatory)} explanatory inputs"
        )
    y = sample.outputs
    var_y = float(np.var(y, ddof=1))
    if not var_y > 0:
        raise DegenerateInputError("the output is constant")
    floor = dispersion_floor_factor * var_y
    X = sample.points[:, list(explanatory)]
    common = {
        "input_bounds": _bounds(sample.inputs, explanatory),
        "active_inputs": explanatory,
        "n_starts": n_starts,
        "max_evals": max_evals,
        "random_state": random_state,
        "n_jobs": n_jobs,
    }
    init = init or {}

    m1 = fit_gp(X, y, nugget="estimate", **_init_kwargs(init.get("mean")), **common)
    resid2 = (y - gp_predict(m1, X)[0]) ** 2
    if np.max(resid2) <= floor:
        v1 = None
        tau = np.full(sample.n, floor)
    else:
        v1 = fit_gp(X, resid2, nugget="estimate", **_init_kwargs(init.get("dispersion")), **common)
        tau = np.maximum(gp_predict(v1, X)[0], floor)

    m2_init = {
        "init": m1.kernel.lengthscales,
        "init_variance": m1.kernel.process_variance,
    }
    m2 = fit_gp(X, y, nugget=tau, **m2_init, **common)
    resid2 = (y - gp_predict(m2, X)[0]) ** 2
    if np.max(resid2) <= floor:
        v2 = None
    else:
        v2_init = _init_kwargs(v1.hyperparameters()) if v1 is not None else {}
        v2 = fit_gp(X, resid2, nugget="estimate", **v2_init, **common)

    trace = [
        _record("m1", m1),
        _record("v1", v1, degenerate=v1 is None),
        _record("m2", m2),
        _record("v2", v2, degenerate=v2 is None),
    ]
    residual = tuple(k for k in range(sample.d) if k not in explanatory)
    return JointGpModel(
        explanatory, residual, list(sample.inputs), m2, v2, trace, floor, tau,
        first_mean_gp=m1, first_dispersion_gp=v1,
    )


def _explanatory_columns(model, X):
    X = as_matrix(X, name="query")
    if X.shape[1] != len(model.inputs):
        raise InvalidArgumentError(
            f"query has {X.shape[1]} columns, the joint model covers {len(model.inputs)} inputs"
        )
    return X[:, list(model.explanatory_inputs)]


def dispersion_predict(model, X):
    """Dispersion component at ``X`` (all inputs, physical units), floored."""
    Xe = _explanatory_columns(model, X)
    if model.dispersion_gp is None:
        return np.full(Xe.shape[0], model.dispersion_floor)
    return np.maximum(gp_predict(model.dispersion_gp, Xe)[0], model.dispersion_floor)


def joint_predict(model, X):
    """Mean and total variance at ``X`` (all inputs, physical units).

    The total variance is the mean GP's kriging variance plus the floored
    dispersion prediction.  Residual-input columns are ignored.
    """
    Xe = _explanatory_columns(model, X)
    mean, kriging_var = gp_predict(model.mean_gp, Xe)
    if model.dispersion_gp is None:
        disp = np.full(Xe.shape[0], model.dispersion_floor)
    else:
        disp = np.maximum(gp_predict(model.dispersion_gp, Xe)[0], model.dispersion_floor)
    return mean, kriging_var + disp


# --- accuracy ----------------------------------------------------------------------


@dataclass(frozen=True)
class Q2Report:
    q2: float
    n_eval: int
    mode: str


def q2(observed, predicted):
    """Predictivity coefficient ``1 - SS_res / SS_tot`` around the observed mean."""
    y = as_vector(observed, name="observed", min_samples=2)
    yhat = as_vector(predicted, name="predicted", min_samples=2)
    if y.shape != yhat.shape:
        raise InvalidArgumentError("observed and predicted differ in length")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if not ss_tot > 0:
        raise DegenerateInputError("observed values are constant")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def q2_loo(model, sample=None):
    """Leave-one-out Q2 of a GP or of a joint model's mean component."""
    gp = model.mean_gp if isinstance(model, JointGpModel) else model
    means, _ = loo_predictions(gp)
    if sample is not None:
        if sample.n != gp.n or not np.array_equal(sample.outputs, gp.outputs):
            raise InvalidArgumentError("the model was not trained on this sample")
    return Q2Report(q2(gp.outputs, means), gp.n, "leave_one_out")


# --- sequential build ----------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    included_inputs: tuple
    model: JointGpModel
    q2_test: float | None
    q2_loo: float
    warm_start_used: bool


@dataclass
class BuildTrajectory:
    iterations: list
    selected_iteration: int
    validation: str
    inputs: list
    aborted: bool = False
    error: str | None = None

    @property
    def best_model(self):
        return self.iterations[self.selected_iteration].model

    def to_csv(self, path):
        names = [s.name for s in self.inputs]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "inputs_included", "q2_test", "q2_loo"]
                            + [f"loglik_{s}" for s in STAGES])
            for j, it in enumerate(self.iterations, start=1):
                lls = [it.model.stage(s).log_likelihood for s in STAGES]
                writer.writerow(
                    [j, ";".join(names[k] for k in it.included_inputs),
                     "" if it.q2_test is None else format(it.q2_test, ".17g"),
                     format(it.q2_loo, ".17g")]
                    + ["" if math.isnan(v) else format(v, ".17g") for v in lls]
                )

    def table(self):
        names = [s.name for s in self.inputs]
        lines = [f"{'iter':>4}  {'added':<12}{'Q2 test':>10}{'Q2 LOO':>10}"]
        for j, it in enumerate(self.iterations, start=1):
            added = names[it.included_inputs[-1]]
            qt = "-" if it.q2_test is None else f"{it.q2_test:.4f}"
            mark = "  *" if j - 1 == self.selected_iteration else ""
            lines.append(f"{j:>4}  {added:<12}{qt:>10}{it.q2_loo:>10.4f}{mark}")
        if self.aborted:
            lines.append(f"aborted: {self.error}")
        return "\n".join(lines)


def _extend(hp, new_count):
    """Append lengthscales at the geometric mean of the existing ones."""
    if hp is None:
        return None
    theta = np.asarray(hp["lengthscales"], dtype=float)
    extra = np.full(new_count - theta.size, float(np.exp(np.mean(np.log(theta)))))
    out = dict(hp)
    out["lengthscales"] = np.concatenate([theta, extra])
    return out


def sequential_build(sample, ordering, test_sample=None, *, dispersion_floor_factor=DEFAULT_FLOOR_FACTOR,
                     n_starts=5, max_evals=None, random_state=0, n_jobs=None):
    """Fit joint GPs on growing prefixes of ``ordering``.

    Iteration ``j`` uses the first ``j`` inputs of ``ordering`` and warm-starts
    from iteration ``j - 1``.  Validation uses ``test_sample`` when given,
    leave-one-out otherwise; the selected iteration maximizes the validation
    Q2, ties going to fewer inputs.  A fit failure stops the loop and returns
    the partial trajectory with ``aborted`` set.
    """
    ordering = [int(k) for k in ordering]
    if not ordering:
        raise InvalidArgumentError("the input ordering is empty")
    if len(set(ordering)) != len(ordering):
        raise InvalidArgumentError("the input ordering repeats an input")
    validation = "test_sample" if test_sample is not None else "leave_one_out"
    iterations = []
    previous = None
    error = None
    for j in range(1, len(ordering) + 1):
        included = tuple(ordering[:j])
        init = None
        if previous is not None:
            warm = previous.warm_start()
            init = {key: _extend(hp, j) for key, hp in warm.items()}
        try:
            model = fit_joint(
                sample, included, init, dispersion_floor_factor=dispersion_floor_factor,
                n_starts=n_starts, max_evals=max_evals, random_state=random_state, n_jobs=n_jobs,
            )
        except (HidimError, np.linalg.LinAlgError) as exc:
            error = f"iteration {j}: {exc}"
            logger.warning("sequential build stopped at %s", error)
            break
        q_test = None
        if test_sample is not None:
            q_test = q2(test_sample.outputs, joint_predict(model, test_sample.points)[0])
        q_loo = q2_loo(model).q2
        iterations.append(IterationRecord(included, model, q_test, q_loo, previous is not None))
        logger.info("iteration %d: Q2 test %s, Q2 LOO %.4f", j, q_test, q_loo)
        previous = model
    if not iterations:
        raise HidimError(f"sequential build failed before the first iteration: {error}")
    scores = [it.q2_test if test_sample is not None else it.q2_loo for it in iterations]
    selected = int(np.argmax(scores))  # first maximum: fewer inputs on ties
    return BuildTrajectory(iterations, selected, validation, list(sample.inputs),
                           aborted=error is not None, error=error)


# --- persistence ---------------------------------------------------------------


def save_joint_model(model, directory):
    """Write the two GP files and a manifest into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    save_model(model.mean_gp, os.path.join(directory, "mean_gp.json"))
    files = {"mean": "mean_gp.json", "dispersion": None}
    if model.dispersion_gp is not None:
        save_model(model.dispersion_gp, os.path.join(directory, "dispersion_gp.json"))
        files["dispersion"] = "dispersion_gp.json"
    manifest = {
        "format": "hidim-joint-gp",
        "version": 1,
        "inputs": [{"name": s.name, "lower": s.lower, "upper": s.upper} for s in model.inputs],
        "explanatory_inputs": list(model.explanatory_inputs),
        "dispersion_floor": model.dispersion_floor,
        "files": files,
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return [os.path.join(directory, f) for f in files.values() if f] + [path]


def load_joint_model(directory):
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "hidim-joint-gp":
        raise InvalidArgumentError(f"{directory} does not hold a joint GP manifest")
    inputs = [InputSpec(s["name"], s["lower"], s["upper"]) for s in manifest["inputs"]]
    mean_gp = load_model(os.path.join(directory, manifest["files"]["mean"]))
    disp = manifest["files"]["dispersion"]
    dispersion_gp = load_model(os.path.join(directory, disp)) if disp else None
    explanatory = tuple(manifest["explanatory_inputs"])
    if tuple(mean_gp.active_inputs) != explanatory:
        raise InvalidArgumentError("mean GP inputs disagree with the manifest")
    residual = tuple(k for k in range(len(inputs)) if k not in explanatory)
    return JointGpModel(
        explanatory, residual, inputs, mean_gp, dispersion_gp, [],
        manifest["dispersion_floor"], mean_gp.kernel.nugget_vector(mean_gp.n),
    )


# --- estimators ----------------------------------------------------------------


def _sample_from_arrays(X, y, input_bounds, input_names):
    names = input_names or [f"x{k + 1}" for k in range(X.shape[1])]
    if input_bounds is None:
        lo, hi = X.min(axis=0), X.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in input_bounds)
    inputs = [InputSpec(n, float(a), float(b)) for n, a, b in zip(names, lo, hi)]
    return LearningSample(X, y, inputs)


class JointGaussianProcess(RegressorMixin, BaseEstimator):
    """Joint mean/dispersion GP over a fixed set of explanatory inputs.

    ``predict(X, return_var=True)`` returns the mean and the total variance
    (kriging variance plus dispersion).
    """

    def __init__(self, explanatory=None, dispersion_floor_factor=DEFAULT_FLOOR_FACTOR, n_starts=5,
                 max_evals=None, input_bounds=None, input_names=None, random_state=0, n_jobs=None):
        self.explanatory = explanatory
        self.dispersion_floor_factor = dispersion_floor_factor
        self.n_starts = n_starts
        self.max_evals = max_evals
        self.input_bounds = input_bounds
        self.input_names = input_names
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        sample = _sample_from_arrays(X, y, self.input_bounds, self.input_names)
        explanatory = range(X.shape[1]) if self.explanatory is None else self.explanatory
        self.model_ = fit_joint(
            sample, explanatory, dispersion_floor_factor=self.dispersion_floor_factor,
            n_starts=self.n_starts, max_evals=self.max_evals, random_state=self.random_state,
            n_jobs=self.n_jobs,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_var=False):
        check_is_fitted(self, "model_")
        mean, var = joint_predict(self.model_, X)
        return (mean, var) if return_var else mean

    def predict_dispersion(self, X):
        check_is_fitted(self, "model_")
        return dispersion_predict(self.model_, X)


class SequentialJointGP(RegressorMixin, BaseEstimator):
    """Sequential joint GP build over a screening ordering.

    If ``ordering`` is None the inputs are screened first with
    :class:`~hidim.screening.HSICScreener` at level ``alpha``.  Passing
    ``X_test, y_test`` to :meth:`fit` validates on that sample instead of by
    leave-one-out.

    Attributes
    ----------
    trajectory_ : BuildTrajectory
    model_ : JointGpModel
        The selected iteration's model.
    ordering_ : list of int
    """

    def __init__(self, ordering=None, alpha=0.1, test="gamma", dispersion_floor_factor=DEFAULT_FLOOR_FACTOR,
                 n_starts=5, max_evals=None, input_bounds=None, input_names=None, random_state=0,
                 n_jobs=None):
        self.ordering = ordering
        self.alpha = alpha
        self.test = test
        self.dispersion_floor_factor = dispersion_floor_factor
        self.n_starts = n_starts
        self.max_evals = max_evals
        self.input_bounds = input_bounds
        self.input_names = input_names
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y, X_test=None, y_test=None):
        X, y = check_X_y(X, y, y_numeric=True)
        sample = _sample_from_arrays(X, y, self.input_bounds, self.input_names)
        if self.ordering is None:
            report = screen_inputs(sample, self.alpha, self.test, seed=self.random_state)
            ordering = report.ordering
            if not ordering:
                raise DegenerateInputError("screening selected no input")
        else:
            ordering = list(self.ordering)
        test = None
        if X_test is not None:
            test = LearningSample(as_matrix(X_test), as_vector(y_test), sample.inputs)
        self.trajectory_ = sequential_build(
            sample, ordering, test, dispersion_floor_factor=self.dispersion_floor_factor,
            n_starts=self.n_starts, max_evals=self.max_evals, random_state=self.random_state,
            n_jobs=self.n_jobs,
        )
        self.ordering_ = ordering
        self.model_ = self.trajectory_.best_model
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_var=False):
        check_is_fitted(self, "model_")
        mean, var = joint_predict(self.model_, X)
        return (mean, var) if return_var else mean
