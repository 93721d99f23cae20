"""Monte Carlo E-step.

For every (subject, component) cell, draw ``m_gauss`` parameter vectors from
the component Gaussian, evaluate the observation likelihood of each draw, and
average: n_ik estimates the prior-predictive integral of subject i under
component k. Draws and log-likelihoods are cached for reuse as M-step
proposals. All averaging runs through log-sum-exp; the linear-scale n_ik and
N_i are reporting conveniences that may underflow without harming the fit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    FatalDegeneracyError,
    MixtureParams,
    Model,
    SubjectRecord,
    obs_loglik_batch,
    sample_component_gaussian,
)
from .rng import STREAM_ESTEP, substream


@dataclass
class NikEstimate:
    """Marginal-likelihood estimate for one (subject, component) cell."""

    nik: float
    se: float
    thetas: np.ndarray  # (m_gauss, p) cached draws
    logliks: np.ndarray  # (m_gauss,) cached log-likelihoods, -inf on failures
    log_nik: float
    rel_se: float  # se / nik, computed stably in log space
    failures: int


@dataclass
class EStepCache:
    """Cached draws, per-cell estimates, and subject-level aggregates.

    Arrays are indexed [subject, component, draw]. ``log_nik``/``log_Ni`` are
    the primary quantities; ``nik``/``Ni`` are their (possibly underflowed)
    linear-scale values with standard errors ``se_nik``/``se_Ni``.
    """

    thetas: np.ndarray  # (n, K, M, p)
    logliks: np.ndarray  # (n, K, M)
    log_nik: np.ndarray  # (n, K)
    nik: np.ndarray  # (n, K)
    se_nik: np.ndarray  # (n, K)
    rel_se_nik: np.ndarray  # (n, K)
    log_Ni: np.ndarray  # (n,)
    Ni: np.ndarray  # (n,)
    se_Ni: np.ndarray  # (n,)
    rel_se_Ni: np.ndarray  # (n,)
    tau: np.ndarray  # (n, K) posterior component memberships
    loglik_total: float
    eval_failures: np.ndarray  # (n, K) failed model evaluations per cell

    @property
    def n(self) -> int:
        return self.logliks.shape[0]

    @property
    def K(self) -> int:
        return self.logliks.shape[1]

    @property
    def m_gauss(self) -> int:
        return self.logliks.shape[2]

    @property
    def p(self) -> int:
        return self.thetas.shape[3]


def _summarize_cell(logliks: np.ndarray) -> tuple[float, float, float, float]:
    """(log_nik, nik, se, rel_se) from one cell's log-likelihood samples.

    Works on max-shifted linear values, so the mean is exact up to one scale
    factor and a zero-variance cell reports se identically zero.
    """
    m = logliks.shape[0]
    ll_max = float(np.max(logliks))
    if ll_max == -math.inf:
        return -math.inf, 0.0, 0.0, 0.0
    v = np.exp(logliks - ll_max)  # in (0, 1], exactly 0 for failed draws
    mean_v = float(v.mean())
    mean_sq = float(v @ v) / m
    log_mean = ll_max + math.log(mean_v)
    if m > 1:
        # mean(L^2)/mean(L)^2 ranges from 1 (constant) to m (single dominant draw)
        rel_var = max(mean_sq / mean_v**2 - 1.0, 0.0) * m / (m - 1)
        rel_se = math.sqrt(rel_var / m)
    else:
        rel_se = 0.0
    nik = math.exp(log_mean)
    return log_mean, nik, nik * rel_se, rel_se


def estimate_nik(
    subject: SubjectRecord,
    k: int,
    params: MixtureParams,
    model: Model,
    m_gauss: int,
    rng: np.random.Generator,
) -> NikEstimate:
    """Monte Carlo estimate of subject ``subject``'s marginal likelihood under
    component ``k``, with the draws retained for the M-step.

    Draws that fail model evaluation contribute likelihood zero; if every draw
    fails the estimate is 0 with zero standard error and the failure count
    reports it.
    """
    if m_gauss < 2:
        raise ValueError("m_gauss must be >= 2")
    err = model.error_model(params.sigma)
    thetas = sample_component_gaussian(params, k, rng, size=m_gauss)
    logliks, failures = obs_loglik_batch(subject, thetas, model, err)
    log_nik, nik, se, rel_se = _summarize_cell(logliks)
    return NikEstimate(
        nik=nik, se=se, thetas=thetas, logliks=logliks, log_nik=log_nik, rel_se=rel_se, failures=failures
    )


def run_estep(
    data: Sequence[SubjectRecord],
    params: MixtureParams,
    model: Model,
    m_gauss: int,
    key: Sequence[int],
    workers: int = 1,
) -> EStepCache:
    """Fill the full (subject, component) grid and the subject aggregates.

    ``key`` identifies the run (typically (seed, iteration)); each cell draws
    from its own substream keyed by ``(key..., i, k)``, so the cache is
    bit-identical for any worker count. Raises FatalDegeneracyError when no
    component explains some subject's data (all draws of every component fail).
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    K, p = params.K, params.p
    if p != model.p:
        raise ValueError(f"params dimension {p} does not match model dimension {model.p}")
    err = model.error_model(params.sigma)

    thetas = np.empty((n, K, m_gauss, p))
    logliks = np.empty((n, K, m_gauss))
    log_nik = np.empty((n, K))
    nik = np.empty((n, K))
    se_nik = np.empty((n, K))
    rel_se_nik = np.empty((n, K))
    failures = np.zeros((n, K), dtype=np.int64)

    def one_cell(cell: tuple[int, int]) -> None:
        i, k = cell
        rng = substream(STREAM_ESTEP, *key, i, k)
        draws = sample_component_gaussian(params, k, rng, size=m_gauss)
        ll, fails = obs_loglik_batch(data[i], draws, model, err)
        thetas[i, k] = draws
        logliks[i, k] = ll
        log_nik[i, k], nik[i, k], se_nik[i, k], rel_se_nik[i, k] = _summarize_cell(ll)
        failures[i, k] = fails

    cells = [(i, k) for i in range(n) for k in range(K)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one_cell, cells))
    else:
        for cell in cells:
            one_cell(cell)

    with np.errstate(divide="ignore"):
        log_w = np.where(params.weights > 0, np.log(params.weights), -np.inf)
    log_terms = log_w[None, :] + log_nik
    log_Ni = logsumexp(log_terms, axis=1)
    for i in range(n):
        if log_Ni[i] == -math.inf:
            raise FatalDegeneracyError(
                f"no component explains subject {data[i].id} at the current parameters",
                subject_id=data[i].id,
            )
    tau = np.exp(log_terms - log_Ni[:, None])
    Ni = np.exp(log_Ni)
    rel_se_Ni = np.sqrt(np.sum((tau * rel_se_nik) ** 2, axis=1))
    se_Ni = Ni * rel_se_Ni
    loglik_total = float(np.sum(log_Ni))

    return EStepCache(
        thetas=thetas,
        logliks=logliks,
        log_nik=log_nik,
        nik=nik,
        se_nik=se_nik,
        rel_se_nik=rel_se_nik,
        log_Ni=log_Ni,
        Ni=Ni,
        se_Ni=se_Ni,
        rel_se_Ni=rel_se_Ni,
        tau=tau,
        loglik_total=loglik_total,
        eval_failures=failures,
    )
