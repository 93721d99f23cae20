"""Shared test helpers: tiny models with closed-form behavior and synthetic
E-step caches with consistent aggregates."""

from __future__ import annotations

import math

import numpy as np
import pytest

from rpem.core import Model, PolynomialError, SubjectRecord
from rpem.estep import EStepCache, _summarize_cell


class FixedModel(Model):
    """Prediction ignores theta entirely, so every draw has the same
    likelihood: Monte Carlo estimates become exact, zero-variance."""

    param_names = ("dummy",)
    uses_residual_sigma = False

    def __init__(self, level: float = 1.0, obs_sigma: float = 1.0):
        self.level = level
        self.obs_sigma = obs_sigma

    def error_model(self, sigma):
        assert sigma is None
        return PolynomialError(c0=self.obs_sigma)

    def predict(self, theta, subject):
        return np.full(subject.m, self.level)


class ConstantModel(Model):
    """predict(theta) = theta at every observation time, fixed Gaussian noise.

    With a single observation y and a Gaussian prior over theta this is the
    conjugate case: evidence and posterior are available in closed form.
    """

    param_names = ("loc",)
    uses_residual_sigma = False

    def __init__(self, obs_sigma: float):
        self.obs_sigma = obs_sigma

    def error_model(self, sigma):
        assert sigma is None
        return PolynomialError(c0=self.obs_sigma)

    def predict(self, theta, subject):
        return np.full(subject.m, float(theta[0]))

    def predict_batch(self, thetas, subject):
        thetas = np.asarray(thetas, dtype=float)
        preds = np.repeat(thetas[:, :1], subject.m, axis=1)
        return preds, np.all(np.isfinite(thetas), axis=1)


def single_obs_subject(y: float, sid: str = "1") -> SubjectRecord:
    return SubjectRecord(id=sid, doses=(), observations=((1.0, y),))


def conjugate_evidence(y: float, mu: float, prior_var: float, obs_var: float) -> float:
    """Closed-form marginal density of y for the conjugate single-observation case."""
    var = prior_var + obs_var
    return math.exp(-0.5 * (y - mu) ** 2 / var) / math.sqrt(2 * math.pi * var)


def conjugate_posterior(y: float, mu: float, prior_var: float, obs_var: float) -> tuple[float, float]:
    """(mean, variance) of the conjugate posterior over theta."""
    prec = 1.0 / prior_var + 1.0 / obs_var
    var = 1.0 / prec
    return var * (mu / prior_var + y / obs_var), var


def rebuild_cache(logliks: np.ndarray, thetas: np.ndarray, weights: np.ndarray) -> EStepCache:
    """Build a cache with aggregates consistent with the given log-likelihoods."""
    n, K, M = logliks.shape
    log_nik = np.empty((n, K))
    nik = np.empty((n, K))
    se = np.empty((n, K))
    rel = np.empty((n, K))
    for i in range(n):
        for k in range(K):
            log_nik[i, k], nik[i, k], se[i, k], rel[i, k] = _summarize_cell(logliks[i, k])
    with np.errstate(divide="ignore"):
        log_w = np.where(weights > 0, np.log(weights), -np.inf)
    log_terms = log_w[None, :] + log_nik
    from scipy.special import logsumexp

    log_ni = logsumexp(log_terms, axis=1)
    tau = np.exp(log_terms - log_ni[:, None])
    rel_ni = np.sqrt(np.sum((tau * rel) ** 2, axis=1))
    ni = np.exp(log_ni)
    return EStepCache(
        thetas=thetas,
        logliks=logliks,
        log_nik=log_nik,
        nik=nik,
        se_nik=se,
        rel_se_nik=rel,
        log_Ni=log_ni,
        Ni=ni,
        se_Ni=ni * rel_ni,
        rel_se_Ni=rel_ni,
        tau=tau,
        loglik_total=float(log_ni.sum()),
        eval_failures=np.zeros((n, K), dtype=np.int64),
    )


def make_synthetic_cache(
    n: int,
    K: int,
    M: int,
    rng: np.random.Generator,
    weights: np.ndarray,
    loglik_spread: float = 0.3,
    p: int = 1,
) -> EStepCache:
    """A frozen cache with random log-likelihoods and consistent aggregates.

    The chain's stationary law over the finite (subject, component, draw)
    support is then exactly computable, which is what the detailed-balance
    tests need.
    """
    logliks = loglik_spread * rng.standard_normal((n, K, M))
    thetas = rng.standard_normal((n, K, M, p))
    return rebuild_cache(logliks, thetas, weights)


def cache_stationary_law(cache: EStepCache, weights: np.ndarray) -> np.ndarray:
    """Exact chain target over the finite cache support:
    pi(i,k,m) proportional to w_k * exp(loglik_ikm) / N_i."""
    w = weights[None, :, None]
    mass = w * np.exp(cache.logliks - cache.log_Ni[:, None, None])
    return mass / mass.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
