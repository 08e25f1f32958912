"""Objective Bayesian inference for the correlation length of isotropic
Gaussian processes with a parametric mean (Universal Kriging).

The main entry points are re-exported here::

    from refprior import DesignSet, RegressionBasis, KernelSpec, build_model
    from refprior import build_posterior_curve

See the submodules for the details: `kernels` (correlation families and
their small-distance series), `gp` (design, basis, correlation matrices),
`bayes` (reference prior, integrated likelihood, posterior quadrature,
prediction), `asymptotics` (large-``theta`` case analysis), `spectral`
(Fourier-side checks) and `cli`.
"""

__version__ = "0.1.0"

from .asymptotics import (
    ExpansionReport,
    NondegeneracyReport,
    SignedSpectrum,
    expansion_report,
    fit_tail_slope,
    inverse_norm_exponent,
    measure_tail_slopes,
    nondegeneracy_check,
    signed_spectrum,
)
from .bayes import (
    PosteriorCurve,
    QuadratureOptions,
    build_posterior_curve,
    log_integrated_likelihood,
    log_reference_prior,
    map_theta,
    predict,
    precise_state,
    prior_curve,
)
from .errors import (
    DegenerateObservationError,
    InputError,
    NumericalError,
    RefPriorError,
)
from .gp import DesignSet, GpModel, RegressionBasis, build_model, correlation_state
from .kernels import KernelSpec, eval_kernel, eval_kernel_dtheta, series_coefficients
from .spectral import f_matrix_check, spectral_quadratic_form

__all__ = [
    "DegenerateObservationError",
    "DesignSet",
    "ExpansionReport",
    "GpModel",
    "InputError",
    "KernelSpec",
    "NondegeneracyReport",
    "NumericalError",
    "PosteriorCurve",
    "QuadratureOptions",
    "RefPriorError",
    "RegressionBasis",
    "SignedSpectrum",
    "build_model",
    "build_posterior_curve",
    "correlation_state",
    "eval_kernel",
    "eval_kernel_dtheta",
    "expansion_report",
    "f_matrix_check",
    "fit_tail_slope",
    "inverse_norm_exponent",
    "log_integrated_likelihood",
    "log_reference_prior",
    "map_theta",
    "measure_tail_slopes",
    "nondegeneracy_check",
    "precise_state",
    "predict",
    "prior_curve",
    "series_coefficients",
    "signed_spectrum",
    "spectral_quadratic_form",
]
