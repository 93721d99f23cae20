"""Reference synthetic scenarios used by the bundled configs and the tests.

Two setups ship with the package: a one-compartment bolus model with a
two-component elimination-rate mixture and proportional noise, and a
single-component Voriconazole-style dosing study (2h IV infusion at t=0, oral
bolus at t=24h, 24 observations over 48h, weight 16.5 kg).
"""

from __future__ import annotations

import numpy as np

from .core import DoseEvent, MixtureParams
from .odesolve import SolverConfig
from .pkmodels import OneCompartmentModel, PolynomialError, VoriconazoleModel
from .sim import SimSpec

ONE_COMPARTMENT_OBS_TIMES = (1.5, 2.0, 3.0, 4.0, 5.5)
ONE_COMPARTMENT_DOSE = 100.0

VORICONAZOLE_OBS_TIMES = tuple(float(t) for t in np.arange(2.0, 49.0, 2.0))
VORICONAZOLE_DOSES = (DoseEvent(0.0, 180.0, 2.0), DoseEvent(24.0, 180.0, 0.0))
VORICONAZOLE_WEIGHT = 16.5


def one_compartment_truth() -> MixtureParams:
    """Two elimination-rate subpopulations (0.3 vs 0.6, 80/20), shared volume."""
    return MixtureParams(
        weights=np.array([0.8, 0.2]),
        means=np.array([[0.3, 20.0], [0.6, 20.0]]),
        covariances=np.array([np.diag([0.06**2, 2.0**2]), np.diag([0.06**2, 2.0**2])]),
        sigma=0.1,
        shared=(1,),  # V
    )


def one_compartment_initial() -> MixtureParams:
    """Deliberately poor symmetric start far from the truth."""
    sd = np.array([1.0 / 3.0, 50.0 / 3.0])
    return MixtureParams(
        weights=np.array([0.5, 0.5]),
        means=np.array([[1.0, 50.0], [1.0, 50.0]]),
        covariances=np.array([np.diag(sd**2), np.diag(sd**2)]),
        sigma=0.3,
        shared=(1,),
    )


def one_compartment_spec(n: int, seed: int = 0) -> SimSpec:
    return SimSpec(
        model=OneCompartmentModel(),
        truth=one_compartment_truth(),
        n=n,
        doses=(DoseEvent(0.0, ONE_COMPARTMENT_DOSE, 0.0),),
        obs_times=ONE_COMPARTMENT_OBS_TIMES,
        seed=seed,
    )


def voriconazole_noise() -> PolynomialError:
    return PolynomialError(c0=0.02, c1=0.1)


def voriconazole_model(use_generic_solver: bool = False) -> VoriconazoleModel:
    return VoriconazoleModel(
        noise=voriconazole_noise(),
        solver=SolverConfig(rtol=1e-6, atol=1e-6),
        use_generic_solver=use_generic_solver,
    )


def voriconazole_truth() -> MixtureParams:
    means = np.array([[2.26, 9.23, 10.32, 1.16, 0.73, 1.75, 1.38]])
    sds = np.array([0.76, 3.96, 4.45, 0.17, 0.07, 0.77, 0.82])
    return MixtureParams(weights=np.ones(1), means=means, covariances=np.diag(sds**2)[None, :, :])


def voriconazole_spec(n: int = 50, seed: int = 0) -> SimSpec:
    return SimSpec(
        model=voriconazole_model(),
        truth=voriconazole_truth(),
        n=n,
        doses=VORICONAZOLE_DOSES,
        obs_times=VORICONAZOLE_OBS_TIMES,
        covariates={"wt": VORICONAZOLE_WEIGHT},
        seed=seed,
    )
