"""The outer EM loop.

Iterates E-step and M-step, watches the log-likelihood: once the ordinary
least-squares slope over the latest ``window`` iterations first turns
negative, the run stops and those iterations' thinned chain states are
declared stabilized. The final estimate re-applies the closed-form updates to
the pooled stabilized samples (none of them are wasted); error bars are the
standard deviation of the mean over the per-iteration estimates, treated as
uncorrelated. A Gaussian-mixture fit of the pooled parameter samples yields
the companion clustering-based estimate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    ComponentStarvationError,
    FatalDegeneracyError,
    MixtureParams,
    Model,
    SubjectRecord,
)
from .estep import run_estep
from .gmm import GmmConfig, align_components, gmm_fit
from .mstep import (
    MStepConfig,
    MStepResult,
    ParamErrors,
    ThinnedSamples,
    estimate_moments,
    run_mstep,
)
from .rng import STREAM_GMM, substream

log = logging.getLogger("rpem")


@dataclass(frozen=True)
class FitConfig:
    model: Model
    initial: MixtureParams
    m_gauss: int = 1000
    mstep: MStepConfig = field(default_factory=MStepConfig)
    max_iterations: int = 200
    window: int = 30
    seed: int = 0
    workers: int = 1
    run_gmm: bool = True

    def __post_init__(self):
        if self.window < 3:
            raise ValueError("window must be >= 3")
        if self.max_iterations < self.window:
            raise ValueError("max_iterations must be >= window")
        if self.m_gauss < 2:
            raise ValueError("m_gauss must be >= 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class FitDiagnostics:
    accept_rates: np.ndarray  # (iterations,)
    eval_failure_rates: np.ndarray  # (iterations,) E-step failure fraction
    subject_share: np.ndarray  # (n,) pooled share of stabilized samples
    degenerate_rejects: int
    stop_slope: float | None  # slope that triggered the stop, None if none did


@dataclass
class FitResult:
    params: MixtureParams  # pooled estimate from the stabilized samples
    errors: ParamErrors  # std of the mean over the window's per-iteration estimates
    gmm_params: MixtureParams | None  # clustering-based estimate, None when disabled
    trace: np.ndarray  # (iterations,) log-likelihood per iteration
    iterations: int
    converged: bool
    samples: ThinnedSamples  # pooled stabilized samples
    diagnostics: FitDiagnostics


def ll_slope(tail: np.ndarray) -> float:
    """Ordinary-least-squares slope of the values against their index."""
    y = np.asarray(tail, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise ValueError("slope needs a 1-d array of at least 2 values")
    t = np.arange(y.size, dtype=float)
    tc = t - t.mean()
    return float(tc @ (y - y.mean()) / (tc @ tc))


def find_stop_iteration(trace: Sequence[float], window: int) -> int | None:
    """First 0-based iteration index at which the trailing-window slope is
    negative, or None if it never is."""
    trace = np.asarray(trace, dtype=float)
    for r in range(window - 1, trace.size):
        if ll_slope(trace[r - window + 1 : r + 1]) < 0:
            return r
    return None


def _window_errors(window_params: Sequence[MixtureParams]) -> ParamErrors:
    """Standard deviation of the mean over the per-iteration estimates."""
    W = len(window_params)
    scale = 1.0 / math.sqrt(W)
    weights = np.std([p.weights for p in window_params], axis=0, ddof=1) * scale
    means = np.std([p.means for p in window_params], axis=0, ddof=1) * scale
    covs = np.std([p.covariances for p in window_params], axis=0, ddof=1) * scale
    sigma = None
    if window_params[0].sigma is not None:
        sigma = float(np.std([p.sigma for p in window_params], ddof=1)) * scale
    return ParamErrors(weights=weights, means=means, covariances=covs, sigma=sigma)


def _pooled_estimate(
    pooled: ThinnedSamples, reference: MixtureParams, data: Sequence[SubjectRecord]
) -> MixtureParams:
    """One pass of the closed-form updates over the pooled stabilized samples.

    The weight update reduces to the visit frequency of each component label
    (the chain's label marginal is exactly the updated weight vector)."""
    K = reference.K
    means, covs, counts = estimate_moments(pooled.theta, pooled.component, K, reference.shared)
    weights = counts / counts.sum()
    sigma = None
    if reference.sigma is not None:
        total_m = sum(s.m for s in data)
        sigma = math.sqrt(float(pooled.resid_quad.mean()) * len(data) / total_m)
    return MixtureParams(
        weights=weights, means=means, covariances=covs, sigma=sigma, shared=reference.shared
    )


def fit(data: Sequence[SubjectRecord], config: FitConfig) -> FitResult:
    """Run the full EM loop on the dataset.

    Emits one tab-separated progress line per iteration (iteration,
    log-likelihood, acceptance rate, trailing slope once available) through
    the ``rpem`` logger. A run that exhausts ``max_iterations`` without the
    slope turning negative returns its best-so-far result flagged
    ``converged=False``. Degeneracy errors propagate annotated with the
    iteration index.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    model = config.model
    params = config.initial
    W = config.window
    trace: list[float] = []
    accept_rates: list[float] = []
    failure_rates: list[float] = []
    window_samples: list[ThinnedSamples] = []
    window_params: list[MixtureParams] = []
    degenerate_total = 0
    converged = False
    stop_slope: float | None = None
    cells = len(data) * params.K

    for r in range(config.max_iterations):
        try:
            cache = run_estep(data, params, model, config.m_gauss, (config.seed, r), config.workers)
            trace.append(cache.loglik_total)
            failure_rates.append(float(cache.eval_failures.sum()) / (cells * config.m_gauss))
            mres: MStepResult = run_mstep(
                cache,
                params,
                config.mstep,
                (config.seed, r),
                model=model,
                data=data,
                workers=config.workers,
            )
        except FatalDegeneracyError as exc:
            exc.iteration = r
            raise
        except ComponentStarvationError as exc:
            exc.iteration = r
            raise
        cache = None  # free the draw arrays before the next iteration allocates
        params = mres.params
        accept_rates.append(mres.accept_rate)
        degenerate_total += mres.degenerate_rejects
        window_samples.append(mres.samples)
        window_params.append(params)
        if len(window_samples) > W:
            window_samples.pop(0)
            window_params.pop(0)
        slope = ll_slope(np.array(trace[-W:])) if len(trace) >= W else None
        log.info(
            "%d\t%.10g\t%.6f\t%s",
            r,
            trace[-1],
            mres.accept_rate,
            "" if slope is None else f"{slope:.6g}",
        )
        if slope is not None and slope < 0:
            converged = True
            stop_slope = slope
            break

    pooled = ThinnedSamples.concatenate(window_samples)
    final_params = _pooled_estimate(pooled, params, data)
    errors = _window_errors(window_params)
    gmm_params = None
    if config.run_gmm:
        raw = gmm_fit(pooled.theta, GmmConfig(K=final_params.K), substream(STREAM_GMM, config.seed))
        gmm_params = align_components(raw, final_params) if final_params.K > 1 else raw
    share = np.bincount(pooled.subject, minlength=len(data)) / len(pooled)
    diagnostics = FitDiagnostics(
        accept_rates=np.array(accept_rates),
        eval_failure_rates=np.array(failure_rates),
        subject_share=share,
        degenerate_rejects=degenerate_total,
        stop_slope=stop_slope,
    )
    return FitResult(
        params=final_params,
        errors=errors,
        gmm_params=gmm_params,
        trace=np.array(trace),
        iterations=len(trace),
        converged=converged,
        samples=pooled,
        diagnostics=diagnostics,
    )
