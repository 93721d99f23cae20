"""Compiled trajectory kernel for the three-state oral/IV absorption model.

Same Dormand-Prince 5(4) stepping, PI control, hard event restarts and forced
output endpoints as :mod:`rpem.odesolve`, specialized to the fixed 3-state
right-hand side so the E-step can evaluate thousands of parameter draws per
subject cheaply. Statuses instead of exceptions; the caller maps them.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_INVALID_THETA = 1
STATUS_STEP_LIMIT = 2
STATUS_DIVERGED = 3

# Dormand-Prince 5(4) coefficients (same tableau as rpem.odesolve)
_C2, _C3, _C4, _C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA
_H0_FRACTION = 1e-3


@njit(cache=True, nogil=True, inline="always")
def _rhs(x1, x2, x3, ka, vm, km, v, kcp, kpc, r):
    mm = vm * x2 / (km * v + x2)
    d1 = -ka * x1
    d2 = ka * x1 + r - mm - kcp * x2 + kpc * x3
    d3 = kcp * x2 - kpc * x3
    return d1, d2, d3


@njit(cache=True, nogil=True)
def _profile(ka, vm, km, v, fa1, kcp, kpc, bounds, seg_rate, seg_bolus, obs_t, rtol, atol, max_steps, out):
    x1 = 0.0
    x2 = 0.0
    x3 = 0.0
    nobs = obs_t.shape[0]
    iobs = 0
    while iobs < nobs and obs_t[iobs] <= bounds[0]:
        out[iobs] = x2 / v
        iobs += 1
    steps = 0
    for s in range(bounds.shape[0] - 1):
        ta = bounds[s]
        tb = bounds[s + 1]
        x1 += seg_bolus[s] * fa1
        r = seg_rate[s]
        t = ta
        h = _H0_FRACTION * (tb - ta)
        err_prev = 1e-4
        k1x1, k1x2, k1x3 = _rhs(x1, x2, x3, ka, vm, km, v, kcp, kpc, r)
        if not (math.isfinite(k1x1) and math.isfinite(k1x2) and math.isfinite(k1x3)):
            return STATUS_DIVERGED
        while t < tb:
            tstop = tb
            if iobs < nobs and obs_t[iobs] < tb:
                tstop = obs_t[iobs]
            while t < tstop:
                steps += 1
                if steps > max_steps:
                    return STATUS_STEP_LIMIT
                hs = h
                hit = False
                if t + hs >= tstop:
                    hs = tstop - t
                    hit = True
                if not hit and hs <= 1e-14 * (abs(t) + 1.0):
                    return STATUS_STEP_LIMIT
                y1 = x1 + hs * _A21 * k1x1
                y2 = x2 + hs * _A21 * k1x2
                y3 = x3 + hs * _A21 * k1x3
                k2x1, k2x2, k2x3 = _rhs(y1, y2, y3, ka, vm, km, v, kcp, kpc, r)
                y1 = x1 + hs * (_A31 * k1x1 + _A32 * k2x1)
                y2 = x2 + hs * (_A31 * k1x2 + _A32 * k2x2)
                y3 = x3 + hs * (_A31 * k1x3 + _A32 * k2x3)
                k3x1, k3x2, k3x3 = _rhs(y1, y2, y3, ka, vm, km, v, kcp, kpc, r)
                y1 = x1 + hs * (_A41 * k1x1 + _A42 * k2x1 + _A43 * k3x1)
                y2 = x2 + hs * (_A41 * k1x2 + _A42 * k2x2 + _A43 * k3x2)
                y3 = x3 + hs * (_A41 * k1x3 + _A42 * k2x3 + _A43 * k3x3)
                k4x1, k4x2, k4x3 = _rhs(y1, y2, y3, ka, vm, km, v, kcp, kpc, r)
                y1 = x1 + hs * (_A51 * k1x1 + _A52 * k2x1 + _A53 * k3x1 + _A54 * k4x1)
                y2 = x2 + hs * (_A51 * k1x2 + _A52 * k2x2 + _A53 * k3x2 + _A54 * k4x2)
                y3 = x3 + hs * (_A51 * k1x3 + _A52 * k2x3 + _A53 * k3x3 + _A54 * k4x3)
                k5x1, k5x2, k5x3 = _rhs(y1, y2, y3, ka, vm, km, v, kcp, kpc, r)
                y1 = x1 + hs * (_A61 * k1x1 + _A62 * k2x1 + _A63 * k3x1 + _A64 * k4x1 + _A65 * k5x1)
                y2 = x2 + hs * (_A61 * k1x2 + _A62 * k2x2 + _A63 * k3x2 + _A64 * k4x2 + _A65 * k5x2)
                y3 = x3 + hs * (_A61 * k1x3 + _A62 * k2x3 + _A63 * k3x3 + _A64 * k4x3 + _A65 * k5x3)
                k6x1, k6x2, k6x3 = _rhs(y1, y2, y3, ka, vm, km, v, kcp, kpc, r)
                xn1 = x1 + hs * (_B1 * k1x1 + _B3 * k3x1 + _B4 * k4x1 + _B5 * k5x1 + _B6 * k6x1)
                xn2 = x2 + hs * (_B1 * k1x2 + _B3 * k3x2 + _B4 * k4x2 + _B5 * k5x2 + _B6 * k6x2)
                xn3 = x3 + hs * (_B1 * k1x3 + _B3 * k3x3 + _B4 * k4x3 + _B5 * k5x3 + _B6 * k6x3)
                k7x1, k7x2, k7x3 = _rhs(xn1, xn2, xn3, ka, vm, km, v, kcp, kpc, r)
                if not (
                    math.isfinite(xn1)
                    and math.isfinite(xn2)
                    and math.isfinite(xn3)
                    and math.isfinite(k7x1)
                    and math.isfinite(k7x2)
                    and math.isfinite(k7x3)
                ):
                    return STATUS_DIVERGED
                e1 = hs * (_E1 * k1x1 + _E3 * k3x1 + _E4 * k4x1 + _E5 * k5x1 + _E6 * k6x1 + _E7 * k7x1)
                e2 = hs * (_E1 * k1x2 + _E3 * k3x2 + _E4 * k4x2 + _E5 * k5x2 + _E6 * k6x2 + _E7 * k7x2)
                e3 = hs * (_E1 * k1x3 + _E3 * k3x3 + _E4 * k4x3 + _E5 * k5x3 + _E6 * k6x3 + _E7 * k7x3)
                s1 = atol + rtol * max(abs(x1), abs(xn1))
                s2 = atol + rtol * max(abs(x2), abs(xn2))
                s3 = atol + rtol * max(abs(x3), abs(xn3))
                q1 = e1 / s1
                q2 = e2 / s2
                q3 = e3 / s3
                err = math.sqrt((q1 * q1 + q2 * q2 + q3 * q3) / 3.0)
                if err <= 1.0:
                    t = tstop if hit else t + hs
                    x1 = xn1
                    x2 = xn2
                    x3 = xn3
                    k1x1 = k7x1
                    k1x2 = k7x2
                    k1x3 = k7x3
                    err = max(err, 1e-10)
                    fac = 0.9 * err ** (-_ALPHA) * err_prev**_BETA
                    if fac < 0.2:
                        fac = 0.2
                    elif fac > 10.0:
                        fac = 10.0
                    candidate = hs * fac
                    if hit:
                        if candidate > h:
                            h = candidate
                    else:
                        h = candidate
                    err_prev = err
                else:
                    fac = 0.9 * err ** (-0.2)
                    if fac < 0.1:
                        fac = 0.1
                    elif fac > 1.0:
                        fac = 1.0
                    h = hs * fac
            while iobs < nobs and obs_t[iobs] == tstop:
                out[iobs] = x2 / v
                iobs += 1
    return STATUS_OK


@njit(cache=True, nogil=True)
def predict_profiles(thetas, wt, bounds, seg_rate, seg_bolus, obs_t, rtol, atol, max_steps):
    """Concentration profiles x2(t_j)/V for a batch of parameter vectors.

    thetas is (M, 7) ordered (Ka, Vmax0, Km, Vc0, FA1, Kcp, Kpc). Returns
    (preds (M, T), status (M,)). Invalid parameter vectors (negative entries,
    or non-positive Km/Vc0) are flagged, not raised.
    """
    M = thetas.shape[0]
    T = obs_t.shape[0]
    preds = np.zeros((M, T))
    status = np.zeros(M, dtype=np.int64)
    for m in range(M):
        ka = thetas[m, 0]
        vmax0 = thetas[m, 1]
        km = thetas[m, 2]
        vc0 = thetas[m, 3]
        fa1 = thetas[m, 4]
        kcp = thetas[m, 5]
        kpc = thetas[m, 6]
        ok = True
        for j in range(7):
            v = thetas[m, j]
            if not math.isfinite(v) or v < 0.0:
                ok = False
        if km <= 0.0 or vc0 <= 0.0:
            ok = False
        if not ok:
            status[m] = STATUS_INVALID_THETA
            continue
        vm = vmax0 * wt**0.75
        vol = vc0 * wt
        status[m] = _profile(
            ka, vm, km, vol, fa1, kcp, kpc, bounds, seg_rate, seg_bolus, obs_t, rtol, atol, max_steps, preds[m]
        )
    return preds, status
