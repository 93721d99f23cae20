"""Compiled Metropolis chain over cached E-step states.

One trial consumes one row of pre-generated uniforms (4 columns, 5 when the
error-bar-aware acceptance is on), so the kernel reproduces bitwise the
sequential reference implementation in :mod:`rpem.mstep` driven by the same
generator.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def run_chain(logliks, log_ni, log_w, relvar_n, relvar_w, uniforms, burn_in, thin, noisy, i0, k0, m0):
    """Walk the chain and return thinned state indices.

    Returns (sub, comp, samp, accepts, degenerate_rejects) where the first
    three arrays hold the post-burn-in states recorded every ``thin`` trials.
    """
    n, num_k, num_m = logliks.shape
    total = uniforms.shape[0]
    trials = total - burn_in
    count = trials // thin
    out_i = np.empty(count, dtype=np.int64)
    out_k = np.empty(count, dtype=np.int64)
    out_m = np.empty(count, dtype=np.int64)
    i1, k1, m1 = i0, k0, m0
    ll1 = logliks[i1, k1, m1]
    accepts = 0
    degenerate = 0
    pos = 0
    for t in range(total):
        i2 = int(uniforms[t, 0] * n)
        k2 = int(uniforms[t, 1] * num_k)
        m2 = int(uniforms[t, 2] * num_m)
        x = uniforms[t, 3]
        ll2 = logliks[i2, k2, m2]
        accepted = False
        if ll2 == -np.inf:
            degenerate += 1
        elif ll1 == -np.inf:
            accepted = True
        else:
            log_mu = ll2 - ll1 + log_ni[i1] - log_ni[i2] + log_w[k2] - log_w[k1]
            if log_mu == -np.inf or log_mu != log_mu:
                accepted = False
            elif noisy:
                relvar = 0.0
                if i2 != i1:
                    relvar += relvar_n[i1] + relvar_n[i2]
                if k2 != k1:
                    relvar += relvar_w[k1] + relvar_w[k2]
                if relvar > 0.0:
                    rels = math.sqrt(relvar)
                    z = (1.0 - x * math.exp(min(-log_mu, 700.0))) / (rels * math.sqrt(2.0))
                    prob = 0.5 * (1.0 + math.erf(z))
                    accepted = uniforms[t, 4] < prob
                else:
                    accepted = True if log_mu >= 0.0 else x < math.exp(log_mu)
            else:
                accepted = True if log_mu >= 0.0 else x < math.exp(log_mu)
        if accepted:
            i1 = i2
            k1 = k2
            m1 = m2
            ll1 = ll2
            accepts += 1
        if t >= burn_in and (t - burn_in + 1) % thin == 0 and pos < count:
            out_i[pos] = i1
            out_k[pos] = k1
            out_m[pos] = m1
            pos += 1
    return out_i, out_k, out_m, accepts, degenerate
