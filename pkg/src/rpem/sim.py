"""Dataset simulator.

Draws each subject's parameter vector from the true population mixture,
redrawing (and counting) any draw the model cannot evaluate, then perturbs the
noise-free predictions with the model's residual-error model. Per-subject
substreams make the output independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    DoseEvent,
    MixtureParams,
    Model,
    SimulationError,
    SubjectRecord,
    sample_component_gaussian,
)
from .rng import STREAM_SIM, substream

_MAX_REDRAWS = 100


@dataclass(frozen=True)
class SimSpec:
    """Everything needed to regenerate a synthetic dataset.

    The residual-error model is the one bound by the model itself (with
    ``truth.sigma`` for proportional-error models), so simulation and fitting
    can never disagree about the noise law.
    """

    model: Model
    truth: MixtureParams
    n: int
    doses: tuple[DoseEvent, ...]
    obs_times: tuple[float, ...]
    covariates: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if len(self.obs_times) == 0:
            raise ValueError("observation times must be non-empty")
        if self.truth.p != self.model.p:
            raise ValueError("truth dimension does not match the model")
        object.__setattr__(self, "doses", tuple(self.doses))
        object.__setattr__(self, "obs_times", tuple(float(t) for t in self.obs_times))


@dataclass
class SimResult:
    subjects: list[SubjectRecord]
    truth_thetas: np.ndarray  # (n, p) the vectors actually used
    components: np.ndarray  # (n,) mixture labels drawn
    redraw_counts: np.ndarray  # (n,) rejected invalid draws per subject


def _draw_theta(
    spec: SimSpec, rng: np.random.Generator
) -> tuple[np.ndarray, int, int]:
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(spec.truth.weights), u, side="right"))
    k = min(k, spec.truth.K - 1)
    redraws = 0
    while True:
        theta = sample_component_gaussian(spec.truth, k, rng)
        if spec.model.theta_valid(theta):
            return theta, k, redraws
        redraws += 1
        if redraws > _MAX_REDRAWS:
            raise SimulationError(
                f"over {_MAX_REDRAWS} consecutive invalid draws from component {k + 1}; "
                "truth parameters are inconsistent with model positivity"
            )


def simulate(spec: SimSpec, seed: int | None = None) -> SimResult:
    """Generate the dataset plus the per-subject truth used to produce it."""
    seed = spec.seed if seed is None else seed
    err = spec.model.error_model(spec.truth.sigma)
    subjects = []
    thetas = np.empty((spec.n, spec.truth.p))
    components = np.empty(spec.n, dtype=np.int64)
    redraws = np.empty(spec.n, dtype=np.int64)
    for i in range(spec.n):
        rng = substream(STREAM_SIM, seed, i)
        theta, k, nr = _draw_theta(spec, rng)
        # predictions need a subject record; values are filled afterwards
        proto = SubjectRecord(
            id=str(i + 1),
            doses=spec.doses,
            observations=tuple((t, 0.0) for t in spec.obs_times),
            covariates=dict(spec.covariates),
        )
        pred = spec.model.predict(theta, proto)
        noise = err.stdev(pred) * rng.standard_normal(len(pred))
        values = pred + noise
        subjects.append(
            SubjectRecord(
                id=proto.id,
                doses=spec.doses,
                observations=tuple(zip(spec.obs_times, values)),
                covariates=dict(spec.covariates),
            )
        )
        thetas[i] = theta
        components[i] = k
        redraws[i] = nr
    return SimResult(subjects=subjects, truth_thetas=thetas, components=components, redraw_counts=redraws)
