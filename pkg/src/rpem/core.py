"""Core domain types and likelihood kernels.

Subjects, dose events, mixture parameters, residual-error models, the model
abstraction, and the Gaussian density kernels shared by the E-step, M-step,
and simulator. All density computations stay in log space; callers form
ratios by exponentiating log-differences, never raw likelihoods.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class RpemError(Exception):
    """Base class for all library errors."""


class NonSPDCovarianceError(RpemError):
    """A covariance matrix failed its Cholesky factorization."""

    def __init__(self, message: str, component: int | None = None):
        super().__init__(message)
        self.component = component


class ModelEvaluationError(RpemError):
    """A model prediction could not be evaluated at the given parameters."""

    def __init__(self, message: str, theta: np.ndarray | None = None, subject_id: str | None = None):
        super().__init__(message)
        self.theta = None if theta is None else np.asarray(theta)
        self.subject_id = subject_id


class StepLimitError(ModelEvaluationError):
    """The ODE step budget was exhausted before reaching the end time."""


class DivergenceError(ModelEvaluationError):
    """The ODE right-hand side or state became non-finite."""


class DegenerateErrorModelError(RpemError):
    """A residual-error model produced a non-positive standard deviation."""


class FatalDegeneracyError(RpemError):
    """No mixture component explains a subject's data at the current parameters."""

    def __init__(self, message: str, subject_id: str | None = None, iteration: int | None = None):
        super().__init__(message)
        self.subject_id = subject_id
        self.iteration = iteration


class ComponentStarvationError(RpemError):
    """A mixture component received no samples in the M-step chain."""

    def __init__(self, message: str, component: int | None = None, iteration: int | None = None):
        super().__init__(message)
        self.component = component
        self.iteration = iteration


class SimulationError(RpemError):
    """Dataset simulation failed (e.g. truth incompatible with positivity)."""


class ConfigError(RpemError):
    """A run-configuration file is malformed or incomplete."""


class DatasetFormatError(RpemError):
    """A dataset file violates the expected format."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoseEvent:
    """A single dose: bolus when duration == 0, constant-rate infusion otherwise."""

    time: float
    amount: float
    duration: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.time) and math.isfinite(self.amount) and math.isfinite(self.duration)):
            raise ValueError("dose event fields must be finite")
        if self.amount < 0:
            raise ValueError(f"dose amount must be >= 0, got {self.amount}")
        if self.duration < 0:
            raise ValueError(f"dose duration must be >= 0, got {self.duration}")

    @property
    def is_bolus(self) -> bool:
        return self.duration == 0.0


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's dosing history, observations and covariates.

    ``observations`` is a sequence of (time, value) pairs with strictly
    increasing, non-negative times; they are exposed as the ``times`` and
    ``values`` arrays after construction.
    """

    id: str
    doses: tuple[DoseEvent, ...]
    observations: tuple[tuple[float, float], ...]
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "doses", tuple(self.doses))
        object.__setattr__(self, "observations", tuple((float(t), float(y)) for t, y in self.observations))
        if len(self.observations) < 1:
            raise ValueError(f"subject {self.id}: at least one observation required")
        times = np.array([t for t, _ in self.observations], dtype=float)
        values = np.array([y for _, y in self.observations], dtype=float)
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(values)):
            raise ValueError(f"subject {self.id}: observations must be finite")
        if times[0] < 0:
            raise ValueError(f"subject {self.id}: observation times must be >= 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"subject {self.id}: observation times must be strictly increasing")
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "_times", times)
        object.__setattr__(self, "_values", values)

    @property
    def times(self) -> np.ndarray:
        return self._times

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def m(self) -> int:
        """Number of observations."""
        return len(self.observations)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MixtureParams:
    """Population parameters: weights, means and covariances of K Gaussian
    components, plus the residual scale ``sigma`` for proportional-error
    models.

    ``shared`` lists the coordinate indices whose mean and covariance entries
    are tied across components (a single Gaussian for those coordinates); the
    remaining coordinates are mixture-specific. ``weight_se`` optionally
    carries the Monte Carlo standard errors of the weights from the update
    that produced them (used by the error-bar-aware Metropolis acceptance).
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    sigma: float | None = None
    shared: tuple[int, ...] = ()
    weight_se: np.ndarray | None = None

    def __post_init__(self):
        w = _readonly(self.weights)
        mu = _readonly(self.means)
        cov = _readonly(self.covariances)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "shared", tuple(sorted(int(j) for j in self.shared)))
        if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3:
            raise ValueError("weights must be (K,), means (K,p), covariances (K,p,p)")
        K, p = mu.shape
        if w.shape != (K,) or cov.shape != (K, p, p):
            raise ValueError("inconsistent shapes across weights/means/covariances")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 within 1e-12, got {w.sum()!r}")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(cov)):
            raise ValueError("means and covariances must be finite")
        chols = np.empty_like(cov)
        for k in range(K):
            c = cov[k]
            scale = max(1.0, float(np.abs(c).max()))
            if np.abs(c - c.T).max() > 1e-12 * scale:
                raise ValueError(f"covariance of component {k + 1} is not symmetric")
            try:
                chols[k] = np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise NonSPDCovarianceError(
                    f"covariance of component {k + 1} is not positive definite", component=k
                ) from None
        chols.flags.writeable = False
        object.__setattr__(self, "_chols", chols)
        for j in self.shared:
            if not 0 <= j < p:
                raise ValueError(f"shared coordinate index {j} out of range for p={p}")
            if np.any(mu[:, j] != mu[0, j]):
                raise ValueError(f"shared coordinate {j}: means differ across components")
            if np.any(cov[:, j, :] != cov[0, j, :]) or np.any(cov[:, :, j] != cov[0, :, j]):
                raise ValueError(f"shared coordinate {j}: covariance entries differ across components")
        if self.sigma is not None:
            if not (math.isfinite(self.sigma) and self.sigma > 0):
                raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
            object.__setattr__(self, "sigma", float(self.sigma))
        if self.weight_se is not None:
            se = _readonly(self.weight_se)
            if se.shape != (K,) or np.any(se < 0) or not np.all(np.isfinite(se)):
                raise ValueError("weight_se must be a finite non-negative (K,) vector")
            object.__setattr__(self, "weight_se", se)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def p(self) -> int:
        return self.means.shape[1]

    @property
    def mixture_specific(self) -> tuple[int, ...]:
        """Coordinate indices that vary across components (complement of ``shared``)."""
        return tuple(j for j in range(self.p) if j not in self.shared)

    def cholesky(self, k: int) -> np.ndarray:
        """Cached lower Cholesky factor of component k's covariance."""
        return self._chols[k]


# ---------------------------------------------------------------------------
# Residual-error models
# ---------------------------------------------------------------------------


class ErrorModel(ABC):
    """Maps model predictions to observation standard deviations."""

    @abstractmethod
    def stdev(self, pred: np.ndarray) -> np.ndarray:
        """Standard deviation of each observation given its prediction."""


@dataclass(frozen=True)
class ProportionalError(ErrorModel):
    """Observation stdev = sigma * |prediction|."""

    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"proportional error requires sigma > 0, got {self.sigma}")

    def stdev(self, pred: np.ndarray) -> np.ndarray:
        return self.sigma * np.abs(pred)

    @staticmethod
    def unit_quadratic(values: np.ndarray, pred: np.ndarray) -> float:
        """Residual quadratic form at unit sigma: sum_j ((y_j - pred_j)/|pred_j|)^2."""
        return float(np.sum(((values - pred) / np.abs(pred)) ** 2))


@dataclass(frozen=True)
class PolynomialError(ErrorModel):
    """Observation stdev = c0 + c1*pred + c2*pred^2 + c3*pred^3."""

    c0: float
    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0

    def __post_init__(self):
        cs = (self.c0, self.c1, self.c2, self.c3)
        if not all(math.isfinite(c) and c >= 0 for c in cs):
            raise ValueError(f"polynomial error coefficients must be >= 0 and finite, got {cs}")
        if all(c == 0 for c in cs):
            raise ValueError("polynomial error coefficients must not all be zero")

    def stdev(self, pred: np.ndarray) -> np.ndarray:
        return ((self.c3 * pred + self.c2) * pred + self.c1) * pred + self.c0


# ---------------------------------------------------------------------------
# Model abstraction
# ---------------------------------------------------------------------------


class Model(ABC):
    """A structural model mapping a parameter vector to predicted concentrations
    at a subject's observation times, together with its residual-error binding.
    """

    #: ordered names of the parameter-vector coordinates
    param_names: tuple[str, ...] = ()
    #: True when the residual scale sigma is a population parameter to estimate
    uses_residual_sigma: bool = False

    @property
    def p(self) -> int:
        return len(self.param_names)

    @abstractmethod
    def predict(self, theta: np.ndarray, subject: SubjectRecord) -> np.ndarray:
        """Predicted concentration at each observation time; raises
        ModelEvaluationError (or a solver subclass) on failure."""

    @abstractmethod
    def error_model(self, sigma: float | None) -> ErrorModel:
        """Bind the residual-error model; ``sigma`` is the current population
        residual scale for models that estimate one, None otherwise."""

    def theta_valid(self, theta: np.ndarray) -> bool:
        """Cheap evaluability check used by the simulator's redraw loop."""
        return bool(np.all(np.isfinite(theta)))

    def predict_batch(self, thetas: np.ndarray, subject: SubjectRecord) -> tuple[np.ndarray, np.ndarray]:
        """Predictions for a batch of parameter vectors.

        Returns (preds, valid) where preds is (M, m_i) and valid flags the rows
        that evaluated successfully. Default implementation loops over
        ``predict``; concrete models override with vectorized/fused paths.
        """
        thetas = np.asarray(thetas, dtype=float)
        M = thetas.shape[0]
        preds = np.zeros((M, subject.m))
        valid = np.ones(M, dtype=bool)
        for i in range(M):
            try:
                preds[i] = self.predict(thetas[i], subject)
            except ModelEvaluationError:
                valid[i] = False
        return preds, valid


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """log N(x; mean, cov). Callers exponentiate differences, never this value."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = x.shape[0]
    if mean.shape != (p,) or cov.shape != (p, p):
        raise ValueError("dimension mismatch between x, mean and cov")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NonSPDCovarianceError("covariance is not positive definite") from None
    z = solve_triangular(chol, x - mean, lower=True)
    return float(-0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 0.5 * p * LOG_2PI)


def gaussian_logpdf_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Batch log-density against a precomputed lower Cholesky factor.

    ``x`` may be (p,) or (M, p); returns a scalar array or (M,).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = chol.shape[0]
    z = solve_triangular(chol, (x - mean).T, lower=True)
    quad = np.sum(z * z, axis=0)
    return -0.5 * quad - np.sum(np.log(np.diag(chol))) - 0.5 * p * LOG_2PI


def obs_loglik(subject: SubjectRecord, theta: np.ndarray, model: Model, err: ErrorModel) -> float:
    """Log-likelihood of a subject's observations at one parameter vector:
    sum over observations of log N(y_j; pred_j, stdev_j^2)."""
    pred = model.predict(np.asarray(theta, dtype=float), subject)
    sd = err.stdev(pred)
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        raise DegenerateErrorModelError(
            f"subject {subject.id}: non-positive observation stdev at theta={np.asarray(theta)}"
        )
    resid = (subject.values - pred) / sd
    return float(-0.5 * np.sum(resid * resid) - np.sum(np.log(sd)) - 0.5 * subject.m * LOG_2PI)


def obs_loglik_batch(
    subject: SubjectRecord, thetas: np.ndarray, model: Model, err: ErrorModel
) -> tuple[np.ndarray, int]:
    """Log-likelihoods for a batch of parameter vectors.

    Rows that fail model evaluation (or produce a degenerate stdev) get
    log-likelihood -inf, i.e. likelihood zero. Returns (logliks, n_failures).
    """
    preds, valid = model.predict_batch(thetas, subject)
    M = preds.shape[0]
    ll = np.full(M, -np.inf)
    ok = valid & np.all(np.isfinite(preds), axis=1)
    if np.any(ok):
        sd = err.stdev(preds[ok])
        sd_ok = np.all(sd > 0, axis=1) & np.all(np.isfinite(sd), axis=1)
        rows = np.flatnonzero(ok)[sd_ok]
        if rows.size:
            sd = sd[sd_ok]
            resid = (subject.values[None, :] - preds[rows]) / sd
            ll[rows] = (
                -0.5 * np.sum(resid * resid, axis=1)
                - np.sum(np.log(sd), axis=1)
                - 0.5 * subject.m * LOG_2PI
            )
    return ll, int(M - np.count_nonzero(np.isfinite(ll)))


def sample_component_gaussian(
    params: MixtureParams, k: int, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Draw theta = mu_k + L_k z with z standard normal, L_k the Cholesky factor
    of component k's covariance. Returns (p,) or (size, p)."""
    if not 0 <= k < params.K:
        raise ValueError(f"component index {k} out of range for K={params.K}")
    chol = params.cholesky(k)
    if size is None:
        z = rng.standard_normal(params.p)
        return params.means[k] + z @ chol.T
    z = rng.standard_normal((size, params.p))
    return params.means[k] + z @ chol.T
