"""Randomized Monte Carlo parametric EM for nonlinear random-effects mixture models.

The E-step estimates each subject's marginal likelihood under every mixture
component by averaging cached Gaussian draws; the M-step samples the joint
(subject, component, parameters) target with a Metropolis chain over those
cached draws and reads the parameter updates off the thinned states. The
outer loop stops when the log-likelihood slope over a trailing window first
turns negative and pools that window's samples into the final estimate.
"""

from .core import (
    ComponentStarvationError,
    DatasetFormatError,
    DegenerateErrorModelError,
    DivergenceError,
    DoseEvent,
    ErrorModel,
    FatalDegeneracyError,
    MixtureParams,
    Model,
    ModelEvaluationError,
    NonSPDCovarianceError,
    PolynomialError,
    ProportionalError,
    RpemError,
    SimulationError,
    StepLimitError,
    SubjectRecord,
    gaussian_logpdf,
    obs_loglik,
    sample_component_gaussian,
)
from .driver import FitConfig, FitResult, fit, find_stop_iteration, ll_slope
from .estep import EStepCache, estimate_nik, run_estep
from .gmm import GmmConfig, align_components, gmm_fit
from .mstep import (
    ChainState,
    MStepConfig,
    MStepResult,
    ThinnedSamples,
    initial_state,
    metropolis_step,
    noisy_accept_prob,
    run_mstep,
    update_weights,
)
from .odesolve import BolusJump, InfusionSegment, OdeProblem, SolverConfig, integrate
from .pkmodels import OneCompartmentModel, VoriconazoleModel
from .sim import SimResult, SimSpec, simulate

__version__ = "0.1.0"

__all__ = [
    "BolusJump",
    "ChainState",
    "ComponentStarvationError",
    "DatasetFormatError",
    "DegenerateErrorModelError",
    "DivergenceError",
    "DoseEvent",
    "ErrorModel",
    "EStepCache",
    "FatalDegeneracyError",
    "FitConfig",
    "FitResult",
    "GmmConfig",
    "InfusionSegment",
    "MStepConfig",
    "MStepResult",
    "MixtureParams",
    "Model",
    "ModelEvaluationError",
    "NonSPDCovarianceError",
    "OdeProblem",
    "OneCompartmentModel",
    "PolynomialError",
    "ProportionalError",
    "RpemError",
    "SimResult",
    "SimSpec",
    "SimulationError",
    "SolverConfig",
    "StepLimitError",
    "SubjectRecord",
    "ThinnedSamples",
    "VoriconazoleModel",
    "align_components",
    "estimate_nik",
    "find_stop_iteration",
    "fit",
    "gaussian_logpdf",
    "gmm_fit",
    "initial_state",
    "integrate",
    "ll_slope",
    "metropolis_step",
    "noisy_accept_prob",
    "obs_loglik",
    "run_estep",
    "run_mstep",
    "sample_component_gaussian",
    "simulate",
    "update_weights",
]
