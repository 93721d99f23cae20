"""Randomized M-step.

A Metropolis chain samples the joint target over (subject, component, theta)
states proportional to w_k * likelihood / N_i, proposing uniformly among the
cached E-step draws so no model evaluation happens here. Closed-form updates
then read the population parameters off the thinned states: component means
and covariances from labeled samples (shared coordinates pooled across all
samples), weights from the cached per-subject component masses, and the
residual sigma from the standardized residual quadratic form.

Acceptance can integrate over the Monte Carlo uncertainty of the acceptance
ratio: with relative errors on N_i and w_k propagated into the ratio's error
bar, the accept probability becomes (1 + erf((mu_A - x) / (sigma_A sqrt(2)))) / 2.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _chainfast
from .core import ComponentStarvationError, MixtureParams, Model, ProportionalError, SubjectRecord
from .estep import EStepCache
from .rng import STREAM_MSTEP, substream

_COV_INFLATION = 1e-10  # added to a component covariance built from too few distinct samples


def _ensure_spd(cov: np.ndarray, context: str) -> np.ndarray:
    """Escalating diagonal jitter until the Cholesky factorization succeeds.

    Sample covariances are Gram matrices, hence PSD up to rounding; a chain
    stuck on near-coincident states can still leave them numerically rank
    deficient beyond what the distinct-count heuristic catches."""
    dim = cov.shape[0]
    jitter = _COV_INFLATION * max(1.0, float(np.trace(cov)) / dim)
    for _ in range(8):
        try:
            np.linalg.cholesky(cov)
            return cov
        except np.linalg.LinAlgError:
            warnings.warn(f"{context}: covariance not positive definite; adding jitter", RuntimeWarning)
            cov = cov + jitter * np.eye(dim)
            jitter *= 100.0
    np.linalg.cholesky(cov)  # exhausted: let the error propagate
    return cov


@dataclass(frozen=True)
class MStepConfig:
    """Chain length and thinning. ``trials`` counts post-burn-in proposals and
    defaults to 50 per subject; ``burn_in`` defaults to 10 * thin."""

    trials: int | None = None
    thin: int = 80
    burn_in: int | None = None
    noisy: bool = True

    def __post_init__(self):
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.trials is not None and self.trials < 10 * self.thin:
            raise ValueError("trials must be at least 10 * thin")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")

    def resolve(self, n: int) -> tuple[int, int]:
        """(trials, burn_in) with defaults filled in for an n-subject dataset."""
        trials = 50 * n if self.trials is None else self.trials
        burn_in = 10 * self.thin if self.burn_in is None else self.burn_in
        if trials < 10 * self.thin:
            raise ValueError(f"trials={trials} must be at least 10 * thin = {10 * self.thin}")
        return trials, burn_in


@dataclass
class ChainState:
    """Current Metropolis state (indices into the E-step cache) plus counters
    and the accumulated thinned states."""

    subject: int
    component: int
    sample: int
    loglik: float
    trials: int = 0
    accepts: int = 0
    degenerate_rejects: int = 0
    thinned: list[tuple[int, int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class StepInfo:
    """Outcome of one Metropolis trial."""

    proposed: tuple[int, int, int]
    log_accept_ratio: float
    accepted: bool


@dataclass
class ThinnedSamples:
    """Thinned chain states materialized as arrays. ``sample`` holds the index
    of each state's draw within its (subject, component) cache cell."""

    subject: np.ndarray  # (S,)
    component: np.ndarray  # (S,)
    sample: np.ndarray  # (S,)
    theta: np.ndarray  # (S, p)
    loglik: np.ndarray  # (S,)
    resid_quad: np.ndarray | None = None  # (S,) standardized residual quadratic forms

    def __len__(self) -> int:
        return self.subject.shape[0]

    @staticmethod
    def concatenate(parts: Sequence["ThinnedSamples"]) -> "ThinnedSamples":
        rq = None
        if all(p.resid_quad is not None for p in parts):
            rq = np.concatenate([p.resid_quad for p in parts])
        return ThinnedSamples(
            subject=np.concatenate([p.subject for p in parts]),
            component=np.concatenate([p.component for p in parts]),
            sample=np.concatenate([p.sample for p in parts]),
            theta=np.concatenate([p.theta for p in parts]),
            loglik=np.concatenate([p.loglik for p in parts]),
            resid_quad=rq,
        )


@dataclass
class ParamErrors:
    """Per-parameter Monte Carlo error bars (standard deviations of the mean)."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, p)
    covariances: np.ndarray  # (K, p, p)
    sigma: float | None = None


@dataclass
class MStepResult:
    params: MixtureParams
    errors: ParamErrors
    samples: ThinnedSamples
    accept_rate: float
    trials: int
    subject_share: np.ndarray  # (n,) fraction of thinned samples per subject
    degenerate_rejects: int


# ---------------------------------------------------------------------------
# Acceptance
# ---------------------------------------------------------------------------


def noisy_accept_prob(mu_a: float, sigma_a: float, x: float) -> float:
    """P(x < A) for A ~ Normal(mu_a, sigma_a); a step function as sigma_a -> 0."""
    if sigma_a <= 0:
        return 1.0 if x < mu_a else 0.0
    return 0.5 * (1.0 + math.erf((mu_a - x) / (sigma_a * math.sqrt(2.0))))


def _rel_vars(cache: EStepCache, params: MixtureParams) -> tuple[np.ndarray, np.ndarray]:
    relvar_n = cache.rel_se_Ni**2
    if params.weight_se is None:
        relvar_w = np.zeros(params.K)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(params.weights > 0, params.weight_se / params.weights, 0.0)
        relvar_w = rel**2
    return relvar_n, relvar_w


def initial_state(cache: EStepCache, params: MixtureParams) -> ChainState:
    """Deterministic chain start: first subject, heaviest component, first draw."""
    k0 = int(np.argmax(params.weights))
    return ChainState(subject=0, component=k0, sample=0, loglik=float(cache.logliks[0, k0, 0]))


def metropolis_step(
    state: ChainState,
    cache: EStepCache,
    params: MixtureParams,
    rng: np.random.Generator,
    noisy: bool = True,
) -> StepInfo:
    """One Metropolis trial, mutating ``state``.

    Proposes (subject, component, draw) uniformly; because the proposal theta
    is a cached draw from the proposed component's Gaussian, the proposal
    density cancels and the log acceptance ratio reduces to

        loglik' - loglik + log N_i - log N_i' + log w_k' - log w_k.

    Consumes exactly 4 uniforms per call (5 when ``noisy``), matching the
    compiled batch kernel stream layout.
    """
    n, num_k, num_m = cache.logliks.shape
    u_i = rng.random()
    u_k = rng.random()
    u_m = rng.random()
    x = rng.random()
    y = rng.random() if noisy else None
    i2 = int(u_i * n)
    k2 = int(u_k * num_k)
    m2 = int(u_m * num_m)
    ll2 = float(cache.logliks[i2, k2, m2])
    ll1 = state.loglik
    log_ni = cache.log_Ni
    with np.errstate(divide="ignore"):
        log_w = np.where(params.weights > 0, np.log(params.weights), -np.inf)

    accepted = False
    log_mu = -math.inf
    if ll2 == -math.inf:
        state.degenerate_rejects += 1
    elif ll1 == -math.inf:
        accepted = True
        log_mu = math.inf
    else:
        log_mu = (
            ll2
            - ll1
            + float(log_ni[state.subject])
            - float(log_ni[i2])
            + float(log_w[k2])
            - float(log_w[state.component])
        )
        if log_mu == -math.inf or math.isnan(log_mu):
            accepted = False
        elif noisy:
            relvar_n, relvar_w = _rel_vars(cache, params)
            relvar = 0.0
            if i2 != state.subject:
                relvar += float(relvar_n[state.subject]) + float(relvar_n[i2])
            if k2 != state.component:
                relvar += float(relvar_w[state.component]) + float(relvar_w[k2])
            if relvar > 0.0:
                rels = math.sqrt(relvar)
                z = (1.0 - x * math.exp(min(-log_mu, 700.0))) / (rels * math.sqrt(2.0))
                accepted = y < 0.5 * (1.0 + math.erf(z))
            else:
                accepted = True if log_mu >= 0.0 else x < math.exp(log_mu)
        else:
            accepted = True if log_mu >= 0.0 else x < math.exp(log_mu)

    state.trials += 1
    if accepted:
        state.subject, state.component, state.sample = i2, k2, m2
        state.loglik = ll2
        state.accepts += 1
    return StepInfo(proposed=(i2, k2, m2), log_accept_ratio=log_mu, accepted=accepted)


# ---------------------------------------------------------------------------
# Closed-form updates
# ---------------------------------------------------------------------------


def update_weights(cache: EStepCache, params: MixtureParams) -> tuple[np.ndarray, np.ndarray]:
    """Weight update w_k' = (w_k / n) sum_i n_ik / N_i, with propagated errors.

    The ratios are formed from log-differences, so underflowed linear-scale
    n_ik do not degrade the update. Error propagation treats the per-cell
    estimates and the subject aggregates as independent (first order).
    """
    n = cache.n
    ratio = np.exp(cache.log_nik - cache.log_Ni[:, None])  # n_ik / N_i, stable
    w_new = params.weights * ratio.mean(axis=0)
    total = float(w_new.sum())
    # sum_k w_k n_ik = N_i per subject, so the correction is rounding only
    if abs(total - 1.0) > 1e-10:
        raise AssertionError(f"weight update normalization drifted: sum = {total!r}")
    w_new = w_new / total
    relvar = cache.rel_se_nik**2 + (cache.rel_se_Ni**2)[:, None]
    se = (params.weights / n) * np.sqrt(np.sum(ratio**2 * relvar, axis=0))
    return w_new, se


def estimate_moments(
    thetas: np.ndarray, labels: np.ndarray, K: int, shared: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample-based mean/covariance updates from labeled chain states.

    Mixture-specific coordinates use the samples carrying each label;
    ``shared`` coordinates pool every sample regardless of label, and their
    cross-covariance against mixture-specific coordinates is structurally
    zero. Raises ComponentStarvationError when a label has no samples.
    """
    S, p = thetas.shape
    alpha = [j for j in range(p) if j not in shared]
    beta = list(shared)
    means = np.zeros((K, p))
    covs = np.zeros((K, p, p))
    counts = np.zeros(K, dtype=np.int64)
    if beta:
        mu_b = thetas[:, beta].mean(axis=0)
        db = thetas[:, beta] - mu_b
        cov_b = (db.T @ db) / S
        if np.unique(thetas[:, beta], axis=0).shape[0] < len(beta) + 1:
            warnings.warn(
                "shared block: fewer than p+1 distinct samples; inflating covariance",
                RuntimeWarning,
                stacklevel=2,
            )
            cov_b = cov_b + _COV_INFLATION * np.eye(len(beta))
        cov_b = _ensure_spd(cov_b, "shared block")
    for k in range(K):
        sel = labels == k
        mk = int(np.count_nonzero(sel))
        counts[k] = mk
        if mk == 0:
            raise ComponentStarvationError(
                f"component {k + 1} received no Metropolis samples", component=k
            )
        block = thetas[sel][:, alpha]
        mu_a = block.mean(axis=0)
        da = block - mu_a
        cov_a = (da.T @ da) / mk
        if np.unique(block, axis=0).shape[0] < len(alpha) + 1:
            # inflation stays inside the component-specific block so the
            # shared entries remain tied across components
            warnings.warn(
                f"component {k + 1}: fewer than p+1 distinct samples; inflating covariance",
                RuntimeWarning,
                stacklevel=2,
            )
            cov_a = cov_a + _COV_INFLATION * np.eye(len(alpha))
        cov_a = _ensure_spd(cov_a, f"component {k + 1}")
        means[k, alpha] = mu_a
        covs[k][np.ix_(alpha, alpha)] = cov_a
        if beta:
            means[k, beta] = mu_b
            covs[k][np.ix_(beta, beta)] = cov_b
    return means, covs, counts


def residual_quadratics(
    samples: ThinnedSamples, data: Sequence[SubjectRecord], model: Model
) -> np.ndarray:
    """Standardized residual quadratic form r = (y - h)^T H^{-1} (y - h) at
    unit residual scale, for every thinned sample (proportional-error models)."""
    r = np.empty(len(samples))
    for i in np.unique(samples.subject):
        sel = np.flatnonzero(samples.subject == i)
        subject = data[int(i)]
        preds, valid = model.predict_batch(samples.theta[sel], subject)
        if not np.all(valid):
            raise AssertionError("a sampled state failed re-evaluation; cache is inconsistent")
        resid = (subject.values[None, :] - preds) / np.abs(preds)
        r[sel] = np.sum(resid * resid, axis=1)
    return r


def _moment_errors(
    thetas: np.ndarray,
    labels: np.ndarray,
    means: np.ndarray,
    K: int,
    shared: tuple[int, ...],
) -> tuple[np.ndarray, np.ndarray]:
    """Standard deviations of the mean for the mean/covariance estimates."""
    S, p = thetas.shape
    alpha = [j for j in range(p) if j not in shared]
    beta = list(shared)
    means_se = np.zeros((K, p))
    covs_se = np.zeros((K, p, p))
    if beta:
        db = thetas[:, beta] - means[0, beta]
        outer_b = db[:, :, None] * db[:, None, :]
        se_mu_b = db.std(axis=0, ddof=1) / math.sqrt(S) if S > 1 else np.zeros(len(beta))
        se_cov_b = outer_b.std(axis=0, ddof=1) / math.sqrt(S) if S > 1 else np.zeros((len(beta),) * 2)
    for k in range(K):
        sel = labels == k
        mk = int(np.count_nonzero(sel))
        da = thetas[sel][:, alpha] - means[k, alpha]
        if mk > 1:
            means_se[k, alpha] = da.std(axis=0, ddof=1) / math.sqrt(mk)
            outer_a = da[:, :, None] * da[:, None, :]
            covs_se[k][np.ix_(alpha, alpha)] = outer_a.std(axis=0, ddof=1) / math.sqrt(mk)
        if beta:
            means_se[k, beta] = se_mu_b
            covs_se[k][np.ix_(beta, beta)] = se_cov_b
    return means_se, covs_se


# ---------------------------------------------------------------------------
# Full M-step
# ---------------------------------------------------------------------------


def run_mstep(
    cache: EStepCache,
    params: MixtureParams,
    config: MStepConfig,
    key: Sequence[int],
    *,
    model: Model | None = None,
    data: Sequence[SubjectRecord] | None = None,
    workers: int = 1,
) -> MStepResult:
    """Burn in, record every ``thin``-th state, and update all parameters.

    ``key`` identifies the run (typically (seed, iteration)); with
    ``workers`` > 1 the trial budget splits over independent chains on the
    same frozen cache (one substream per chain), whose thinned samples are
    merged after per-chain burn-in. ``model`` and ``data`` are required when
    ``params.sigma`` is estimated (proportional-error models).
    """
    n, K, M = cache.logliks.shape
    trials, burn_in = config.resolve(n)
    if params.sigma is not None and (model is None or data is None):
        raise ValueError("sigma update requires model and data")

    with np.errstate(divide="ignore"):
        log_w = np.where(params.weights > 0, np.log(params.weights), -np.inf)
    relvar_n, relvar_w = _rel_vars(cache, params)
    start = initial_state(cache, params)

    chains = max(1, workers)
    per_chain = -(-trials // chains)  # ceil
    cols = 5 if config.noisy else 4

    def run_one(chain: int):
        rng = substream(STREAM_MSTEP, *key, chain)
        uniforms = rng.random((burn_in + per_chain, cols))
        return _chainfast.run_chain(
            cache.logliks,
            cache.log_Ni,
            log_w,
            relvar_n,
            relvar_w,
            uniforms,
            burn_in,
            config.thin,
            config.noisy,
            start.subject,
            start.component,
            start.sample,
        )

    if chains > 1:
        with ThreadPoolExecutor(max_workers=chains) as pool:
            results = list(pool.map(run_one, range(chains)))
    else:
        results = [run_one(0)]

    sub = np.concatenate([r[0] for r in results])
    comp = np.concatenate([r[1] for r in results])
    samp = np.concatenate([r[2] for r in results])
    accepts = sum(int(r[3]) for r in results)
    degenerate = sum(int(r[4]) for r in results)
    total_trials = chains * per_chain
    total_proposals = chains * (burn_in + per_chain)

    theta = cache.thetas[sub, comp, samp]
    loglik = cache.logliks[sub, comp, samp]
    samples = ThinnedSamples(subject=sub, component=comp, sample=samp, theta=theta, loglik=loglik)

    try:
        means, covs, _ = estimate_moments(theta, comp, K, params.shared)
    except ComponentStarvationError as exc:
        raise ComponentStarvationError(
            f"{exc} (weight collapse at the current parameters?)", component=exc.component
        ) from None
    w_new, w_se = update_weights(cache, params)

    sigma_new = None
    sigma_se = None
    if params.sigma is not None:
        assert isinstance(model.error_model(params.sigma), ProportionalError)
        r = residual_quadratics(samples, data, model)
        samples.resid_quad = r
        total_m = sum(s.m for s in data)
        scale = n / total_m
        sigma_new = math.sqrt(float(r.mean()) * scale)
        se_sigma2 = scale * float(r.std(ddof=1)) / math.sqrt(len(r)) if len(r) > 1 else 0.0
        sigma_se = se_sigma2 / (2.0 * sigma_new) if sigma_new > 0 else 0.0

    means_se, covs_se = _moment_errors(theta, comp, means, K, params.shared)
    new_params = MixtureParams(
        weights=w_new,
        means=means,
        covariances=covs,
        sigma=sigma_new,
        shared=params.shared,
        weight_se=w_se,
    )
    errors = ParamErrors(weights=w_se, means=means_se, covariances=covs_se, sigma=sigma_se)
    share = np.bincount(sub, minlength=n) / len(sub)
    return MStepResult(
        params=new_params,
        errors=errors,
        samples=samples,
        accept_rate=accepts / total_proposals if total_proposals else 0.0,
        trials=total_trials,
        subject_share=share,
        degenerate_rejects=degenerate,
    )
