"""Screening and joint Gaussian-process metamodeling for high-dimensional simulators.

The workflow has three steps: draw a space-filling Latin hypercube
(:mod:`hidim.design`), rank the inputs by HSIC dependence with the output
(:mod:`hidim.screening`), then build a joint mean/dispersion GP that adds the
ranked inputs one at a time (:mod:`hidim.jointgp`, on top of
:mod:`hidim.gpcore`).  :mod:`hidim.bench` provides analytic test functions.
"""

from ._exceptions import (
    DegenerateInputError,
    HidimError,
    IllConditionedCovarianceError,
    InvalidArgumentError,
    SchemaError,
)
from .design import (
    Design,
    InputSpec,
    LearningSample,
    centered_l2_discrepancy,
    lhs_sample,
    maximin_distance,
    optimize_lhs,
    scale_design,
    unit_inputs,
)
from .gpcore import GaussianProcessModel, GpModel, KernelConfig, fit_gp, gp_predict, loo_predictions
from .jointgp import (
    BuildTrajectory,
    JointGaussianProcess,
    JointGpModel,
    SequentialJointGP,
    fit_joint,
    joint_predict,
    q2,
    q2_loo,
    sequential_build,
)
from .screening import HSICScreener, ScreeningReport, hsic_gamma_test, hsic_permutation_test, r2_hsic, screen_inputs

__version__ = "0.1.0"

__all__ = [
    "HidimError",
    "InvalidArgumentError",
    "DegenerateInputError",
    "IllConditionedCovarianceError",
    "SchemaError",
    "Design",
    "InputSpec",
    "LearningSample",
    "unit_inputs",
    "lhs_sample",
    "optimize_lhs",
    "centered_l2_discrepancy",
    "maximin_distance",
    "scale_design",
    "ScreeningReport",
    "HSICScreener",
    "screen_inputs",
    "r2_hsic",
    "hsic_gamma_test",
    "hsic_permutation_test",
    "KernelConfig",
    "GpModel",
    "GaussianProcessModel",
    "fit_gp",
    "gp_predict",
    "loo_predictions",
    "JointGpModel",
    "BuildTrajectory",
    "JointGaussianProcess",
    "SequentialJointGP",
    "fit_joint",
    "joint_predict",
    "sequential_build",
    "q2",
    "q2_loo",
]
