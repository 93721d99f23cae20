"""Standalone full-covariance Gaussian-mixture EM.

Used to extract population parameters directly from the stabilized chain
samples (the clustering-based estimate reported alongside the main one).
Plain EM with k-means++-style seeding from the data, multiple restarts, and
covariance-collapse regularization.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .core import MixtureParams, RpemError, gaussian_logpdf_chol


class GmmCollapseError(RpemError):
    """Every restart collapsed onto degenerate covariances."""


@dataclass(frozen=True)
class GmmConfig:
    K: int
    max_iters: int = 500
    tol: float = 1e-8  # relative log-likelihood change
    n_init: int = 5

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1 or self.n_init < 1:
            raise ValueError("max_iters and n_init must be >= 1")


def _kmeanspp_centers(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Seed means from the samples, spreading by squared distance."""
    S = x.shape[0]
    centers = [x[int(rng.integers(S))]]
    for _ in range(1, K):
        d2 = np.min(
            np.stack([np.sum((x - c) ** 2, axis=1) for c in centers], axis=1), axis=1
        )
        total = float(d2.sum())
        if total <= 0:
            centers.append(x[int(rng.integers(S))])
            continue
        centers.append(x[int(rng.choice(S, p=d2 / total))])
    return np.array(centers)


def _regularize(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    """Lift collapsing covariances; flags whether the floor was hit."""
    p = cov.shape[0]
    tr = float(np.trace(cov)) / p
    if tr <= 0:
        return cov + 1e-8 * np.eye(p), True
    min_eig = float(np.linalg.eigvalsh(cov)[0])
    if min_eig < 1e-12 * tr:
        return cov + 1e-8 * tr * np.eye(p), True
    return cov, False


def _single_fit(
    x: np.ndarray, K: int, config: GmmConfig, rng: np.random.Generator
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, bool, list[float]]:
    S, p = x.shape
    means = _kmeanspp_centers(x, K, rng)
    base = np.cov(x, rowvar=False, bias=True).reshape(p, p)
    base, _ = _regularize(base)
    covs = np.repeat(base[None, :, :], K, axis=0)
    weights = np.full(K, 1.0 / K)
    loglik = -math.inf
    collapsed = False
    trace: list[float] = []
    for _ in range(config.max_iters):
        logdens = np.empty((S, K))
        for k in range(K):
            chol = np.linalg.cholesky(covs[k])
            logdens[:, k] = math.log(weights[k]) + gaussian_logpdf_chol(x, means[k], chol)
        lognorm = logsumexp(logdens, axis=1)
        new_loglik = float(lognorm.sum())
        trace.append(new_loglik)
        resp = np.exp(logdens - lognorm[:, None])
        nk = resp.sum(axis=0)
        for k in range(K):
            if nk[k] < 1e-10:  # component lost all responsibility
                collapsed = True
                continue
            weights[k] = nk[k] / S
            means[k] = resp[:, k] @ x / nk[k]
            d = x - means[k]
            cov = (resp[:, k] * d.T) @ d / nk[k]
            cov = 0.5 * (cov + cov.T)
            cov, hit = _regularize(cov)
            if hit:
                warnings.warn(
                    f"mixture component {k + 1} covariance collapsed; regularized",
                    RuntimeWarning,
                    stacklevel=2,
                )
                collapsed = True
            covs[k] = cov
        weights = weights / weights.sum()
        if new_loglik - loglik < config.tol * max(1.0, abs(new_loglik)) and new_loglik >= loglik - 1e-9:
            loglik = new_loglik
            break
        loglik = new_loglik
    return loglik, weights, means, covs, collapsed, trace


def gmm_fit(samples: np.ndarray, config: GmmConfig, rng: np.random.Generator) -> MixtureParams:
    """Best-of-``n_init`` EM fit of a K-component full-covariance mixture.

    K=1 short-circuits to the exact closed form (sample mean, maximum
    likelihood covariance). Raises GmmCollapseError when every restart needed
    covariance regularization.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise ValueError("samples must be (S, p)")
    S, p = x.shape
    if S < config.K * (p + 1):
        raise ValueError(f"need at least K*(p+1) = {config.K * (p + 1)} samples, got {S}")
    if config.K == 1:
        mean = x.mean(axis=0)
        d = x - mean
        cov = (d.T @ d) / S
        return MixtureParams(weights=np.ones(1), means=mean[None, :], covariances=cov[None, :, :])
    best = None
    all_collapsed = True
    for child in rng.spawn(config.n_init):
        loglik, weights, means, covs, collapsed, _ = _single_fit(x, config.K, config, child)
        all_collapsed = all_collapsed and collapsed
        if best is None or loglik > best[0]:
            best = (loglik, weights, means, covs)
    if all_collapsed:
        raise GmmCollapseError("every EM restart collapsed onto degenerate covariances")
    _, weights, means, covs = best
    return MixtureParams(weights=weights, means=means, covariances=covs)


def align_components(fitted: MixtureParams, reference: MixtureParams) -> MixtureParams:
    """Permute ``fitted`` components to best match ``reference`` means, using
    Mahalanobis distance under the reference covariances (for side-by-side
    reporting)."""
    K = reference.K
    if fitted.K != K:
        raise ValueError("component counts differ")
    cost = np.empty((K, K))
    for i in range(K):  # reference index
        chol = reference.cholesky(i)
        for j in range(K):  # fitted index
            z = np.linalg.solve(chol, fitted.means[j] - reference.means[i])
            cost[i, j] = float(z @ z)
    _, perm = linear_sum_assignment(cost)
    return MixtureParams(
        weights=fitted.weights[perm],
        means=fitted.means[perm],
        covariances=fitted.covariances[perm],
        sigma=fitted.sigma,
        shared=fitted.shared,
        weight_se=None if fitted.weight_se is None else fitted.weight_se[perm],
    )
