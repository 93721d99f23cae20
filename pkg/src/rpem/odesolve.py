"""Adaptive Dormand-Prince 5(4) integrator with exact dose-event handling.

Dose events never rely on step-size luck: the time axis is split into hard
segments at every bolus time and infusion-rate change, integration restarts
at each segment boundary (fresh initial step), and bolus jumps are applied
after the boundary state is recorded. Requested output times are forced step
endpoints but do not reset the adapted step size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import DivergenceError, StepLimitError

# Dormand-Prince 5(4) tableau; the propagated solution is 5th order, the
# E-row is the difference against the embedded 4th-order solution.
_C = np.array([0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1.0 / 5.0]),
    np.array([3.0 / 40.0, 9.0 / 40.0]),
    np.array([44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0]),
    np.array([19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0]),
    np.array([9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0]),
    np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0]),
]
_B = np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0])
_E = np.array(
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0]
)

# PI step-size controller constants (embedded order 4 => exponent base 1/5)
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA
_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0
_H0_FRACTION = 1e-3  # initial step = 1e-3 * segment length unless configured


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    max_steps: int = 100_000
    initial_step: float | None = None

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive when given")


@dataclass(frozen=True)
class BolusJump:
    """Instantaneous state jump applied when the integration reaches ``time``."""

    time: float
    delta: np.ndarray


@dataclass(frozen=True)
class InfusionSegment:
    """Constant additive input rate over [start, stop); overlaps are additive."""

    start: float
    stop: float
    rate: np.ndarray

    def __post_init__(self):
        if self.stop <= self.start:
            raise ValueError("infusion stop must be after start")


@dataclass
class OdeProblem:
    """Right-hand side, initial state, dose events and requested output times.

    ``rhs(t, x, r)`` receives the summed infusion-rate vector active at time t
    and must return dx/dt including that input.
    """

    dimension: int
    rhs: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    x0: np.ndarray
    t0: float
    t_end: float
    output_times: Sequence[float]
    boluses: Sequence[BolusJump] = field(default_factory=list)
    infusions: Sequence[InfusionSegment] = field(default_factory=list)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        out = np.asarray(self.output_times, dtype=float)
        if self.x0.shape != (self.dimension,):
            raise ValueError("x0 must have the problem dimension")
        if self.t_end < self.t0:
            raise ValueError("t_end must be >= t0")
        if out.size and (out[0] < self.t0 or out[-1] > self.t_end or np.any(np.diff(out) < 0)):
            raise ValueError("output times must be sorted within [t0, t_end]")
        self.output_times = out


def _segment_boundaries(problem: OdeProblem) -> np.ndarray:
    times = {problem.t0, problem.t_end}
    for b in problem.boluses:
        if problem.t0 < b.time < problem.t_end:
            times.add(float(b.time))
    for seg in problem.infusions:
        for t in (seg.start, seg.stop):
            if problem.t0 < t < problem.t_end:
                times.add(float(t))
    return np.array(sorted(times))


def _active_rate(problem: OdeProblem, ta: float, tb: float) -> np.ndarray:
    rate = np.zeros(problem.dimension)
    for seg in problem.infusions:
        # segment boundaries include every start/stop, so (ta, tb) is either
        # fully inside or fully outside each infusion window
        if seg.start <= ta and tb <= seg.stop:
            rate = rate + np.asarray(seg.rate, dtype=float)
    return rate


def _bolus_delta(problem: OdeProblem, t: float) -> np.ndarray | None:
    delta = None
    for b in problem.boluses:
        if b.time == t:
            d = np.asarray(b.delta, dtype=float)
            delta = d if delta is None else delta + d
    return delta


def integrate(problem: OdeProblem, config: SolverConfig) -> np.ndarray:
    """Dense output at every requested time; shape (len(output_times), dimension).

    Raises StepLimitError when ``max_steps`` accepted-or-rejected steps are
    exhausted over the whole trajectory, DivergenceError on non-finite state
    or right-hand side.
    """
    out = np.empty((len(problem.output_times), problem.dimension))
    x = problem.x0.copy()
    bounds = _segment_boundaries(problem)
    obs = problem.output_times
    iobs = 0
    # outputs at exactly t0 report the pre-dose initial state
    while iobs < len(obs) and obs[iobs] <= problem.t0:
        out[iobs] = x
        iobs += 1
    steps = 0
    budget = config.max_steps

    for s in range(len(bounds) - 1):
        ta, tb = float(bounds[s]), float(bounds[s + 1])
        delta = _bolus_delta(problem, ta)
        if delta is not None:
            x = x + delta
        rate = _active_rate(problem, ta, tb)

        def f(t: float, y: np.ndarray) -> np.ndarray:
            return np.asarray(problem.rhs(t, y, rate), dtype=float)

        t = ta
        h = config.initial_step if config.initial_step is not None else _H0_FRACTION * (tb - ta)
        h = min(h, tb - ta)
        err_prev = 1e-4
        k1 = f(t, x)
        if not np.all(np.isfinite(k1)):
            raise DivergenceError(f"non-finite right-hand side at t={t}")
        while t < tb:
            tstop = tb
            if iobs < len(obs) and obs[iobs] < tb:
                tstop = float(obs[iobs])
            while t < tstop:
                steps += 1
                if steps > budget:
                    raise StepLimitError(f"step budget {budget} exhausted at t={t}")
                hs = h
                hit = False
                if t + hs >= tstop:
                    hs = tstop - t
                    hit = True
                if not hit and hs <= 1e-14 * (abs(t) + 1.0):
                    raise StepLimitError(f"step size underflow at t={t} (stiffness?)")
                ks = np.empty((7, problem.dimension))
                ks[0] = k1
                for stage in range(1, 7):
                    y = x + hs * (_A[stage] @ ks[:stage])
                    ks[stage] = f(t + _C[stage] * hs, y)
                x_new = x + hs * (_B @ ks)
                if not np.all(np.isfinite(x_new)) or not np.all(np.isfinite(ks[6])):
                    raise DivergenceError(f"non-finite state or right-hand side near t={t}")
                e = hs * (_E @ ks)
                scale = config.atol + config.rtol * np.maximum(np.abs(x), np.abs(x_new))
                err = float(np.sqrt(np.mean((e / scale) ** 2)))
                if err <= 1.0:
                    t = tstop if hit else t + hs
                    x = x_new
                    k1 = ks[6]  # FSAL: stage 7 equals f at the new point
                    err = max(err, 1e-10)
                    fac = _SAFETY * err ** (-_ALPHA) * err_prev ** _BETA
                    candidate = hs * min(_FAC_MAX, max(_FAC_MIN, fac))
                    # a step clamped to hit a forced endpoint must not shrink
                    # the controller's natural step
                    h = max(h, candidate) if hit else candidate
                    err_prev = err
                else:
                    h = hs * min(1.0, max(0.1, _SAFETY * err ** (-0.2)))
            while iobs < len(obs) and obs[iobs] == tstop:
                out[iobs] = x
                iobs += 1
    # a bolus exactly at t_end cannot affect any output but completes the state
    delta = _bolus_delta(problem, problem.t_end)
    if delta is not None and problem.t_end > problem.t0:
        x = x + delta
    return out
