"""The two concrete structural models.

OneCompartmentModel: analytic bolus model, concentration (D/V) * exp(-k t),
proportional residual error with an estimated sigma.

VoriconazoleModel: three-state absorption model (oral depot, central
compartment with Michaelis-Menten elimination, peripheral compartment) with
weight-scaled secondary parameters and a fixed polynomial error model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _vorifast, odesolve
from .core import (
    DivergenceError,
    ErrorModel,
    Model,
    ModelEvaluationError,
    PolynomialError,
    ProportionalError,
    StepLimitError,
    SubjectRecord,
)


class OneCompartmentModel(Model):
    """Single-compartment elimination after one bolus dose at time zero.

    Parameter order (k, V): elimination rate constant and volume. The dose is
    read from the subject record, which must carry exactly one bolus at t=0.
    """

    param_names = ("k", "V")
    uses_residual_sigma = True

    def error_model(self, sigma: float | None) -> ErrorModel:
        if sigma is None:
            raise ValueError("one-compartment model requires a residual sigma")
        return ProportionalError(sigma)

    def theta_valid(self, theta: np.ndarray) -> bool:
        k, v = float(theta[0]), float(theta[1])
        return math.isfinite(k) and math.isfinite(v) and v > 0

    @staticmethod
    def _dose(subject: SubjectRecord) -> float:
        if len(subject.doses) != 1 or not subject.doses[0].is_bolus or subject.doses[0].time != 0.0:
            raise ModelEvaluationError(
                f"subject {subject.id}: one-compartment model expects a single bolus dose at t=0",
                subject_id=subject.id,
            )
        return subject.doses[0].amount

    def predict(self, theta: np.ndarray, subject: SubjectRecord) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        k, v = theta[0], theta[1]
        if not self.theta_valid(theta):
            raise ModelEvaluationError(
                f"subject {subject.id}: one-compartment model requires V > 0, got theta={theta}",
                theta=theta,
                subject_id=subject.id,
            )
        pred = (self._dose(subject) / v) * np.exp(-k * subject.times)
        if not np.all(np.isfinite(pred)):
            raise ModelEvaluationError(
                f"subject {subject.id}: non-finite prediction at theta={theta}",
                theta=theta,
                subject_id=subject.id,
            )
        return pred

    def predict_batch(self, thetas: np.ndarray, subject: SubjectRecord) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.asarray(thetas, dtype=float)
        dose = self._dose(subject)
        k = thetas[:, 0:1]
        v = thetas[:, 1:2]
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            preds = (dose / v) * np.exp(-k * subject.times[None, :])
        valid = (v[:, 0] > 0) & np.all(np.isfinite(thetas), axis=1) & np.all(np.isfinite(preds), axis=1)
        preds[~valid] = 0.0
        return preds, valid


@dataclass
class VoriconazoleModel(Model):
    """Oral depot + central + peripheral compartments, Michaelis-Menten
    elimination from the central compartment.

    Parameter order (Ka, Vmax0, Km, Vc0, FA1, Kcp, Kpc). Secondary parameters
    scale with the weight covariate: Vm = Vmax0 * wt^0.75, V = Vc0 * wt.
    Boluses are oral (amount * FA1 into the depot); infusions run IV into the
    central compartment at amount/duration. Concentration is x2(t)/V.

    Negative parameter draws and non-positive Km or Vc0 are evaluation
    failures, not clamped. ``use_generic_solver`` routes predictions through
    :func:`rpem.odesolve.integrate` instead of the compiled kernel (the two
    paths implement the same algorithm and are cross-checked in the tests).
    """

    noise: PolynomialError
    solver: odesolve.SolverConfig = field(default_factory=odesolve.SolverConfig)
    weight_covariate: str = "wt"
    use_generic_solver: bool = False

    param_names = ("Ka", "Vmax0", "Km", "Vc0", "FA1", "Kcp", "Kpc")
    uses_residual_sigma = False

    def error_model(self, sigma: float | None) -> ErrorModel:
        if sigma is not None:
            raise ValueError("the polynomial-noise model does not estimate a residual sigma")
        return self.noise

    def theta_valid(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (7,) or not np.all(np.isfinite(theta)) or np.any(theta < 0):
            return False
        return theta[2] > 0 and theta[3] > 0  # Km, Vc0 strictly positive

    def _weight(self, subject: SubjectRecord) -> float:
        try:
            wt = float(subject.covariates[self.weight_covariate])
        except KeyError:
            raise ModelEvaluationError(
                f"subject {subject.id}: missing covariate {self.weight_covariate!r}",
                subject_id=subject.id,
            ) from None
        if not (wt > 0 and math.isfinite(wt)):
            raise ModelEvaluationError(
                f"subject {subject.id}: covariate {self.weight_covariate!r} must be positive",
                subject_id=subject.id,
            )
        return wt

    def _events(self, subject: SubjectRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Hard segment boundaries, per-segment infusion rate into the central
        compartment, and per-segment raw bolus amount entering the depot."""
        t_end = float(subject.times[-1])
        cuts = {0.0, t_end}
        for d in subject.doses:
            if d.is_bolus:
                if 0.0 < d.time < t_end:
                    cuts.add(d.time)
            else:
                for t in (d.time, d.time + d.duration):
                    if 0.0 < t < t_end:
                        cuts.add(t)
        bounds = np.array(sorted(cuts))
        nseg = len(bounds) - 1
        seg_rate = np.zeros(nseg)
        seg_bolus = np.zeros(nseg)
        for d in subject.doses:
            for s in range(nseg):
                if d.is_bolus:
                    if d.time == bounds[s]:
                        seg_bolus[s] += d.amount
                elif d.time <= bounds[s] and bounds[s + 1] <= d.time + d.duration:
                    seg_rate[s] += d.amount / d.duration
        return bounds, seg_rate, seg_bolus

    def predict(self, theta: np.ndarray, subject: SubjectRecord) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.use_generic_solver:
            return self._predict_generic(theta, subject)
        preds, status = self._run_kernel(theta[None, :], subject)
        self._raise_for_status(int(status[0]), theta, subject)
        return preds[0]

    def _run_kernel(self, thetas: np.ndarray, subject: SubjectRecord) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.ascontiguousarray(np.asarray(thetas, dtype=float))
        if thetas.ndim != 2 or thetas.shape[1] != 7:
            raise ValueError("thetas must be (M, 7)")
        wt = self._weight(subject)
        bounds, seg_rate, seg_bolus = self._events(subject)
        return _vorifast.predict_profiles(
            thetas,
            wt,
            bounds,
            seg_rate,
            seg_bolus,
            subject.times,
            self.solver.rtol,
            self.solver.atol,
            self.solver.max_steps,
        )

    def predict_batch(self, thetas: np.ndarray, subject: SubjectRecord) -> tuple[np.ndarray, np.ndarray]:
        if self.use_generic_solver:
            return super().predict_batch(thetas, subject)
        preds, status = self._run_kernel(thetas, subject)
        return preds, status == _vorifast.STATUS_OK

    def _raise_for_status(self, status: int, theta: np.ndarray, subject: SubjectRecord) -> None:
        if status == _vorifast.STATUS_INVALID_THETA:
            raise ModelEvaluationError(
                f"subject {subject.id}: invalid parameters {theta}", theta=theta, subject_id=subject.id
            )
        if status == _vorifast.STATUS_STEP_LIMIT:
            raise StepLimitError(
                f"subject {subject.id}: step budget exhausted at theta={theta}",
                theta=theta,
                subject_id=subject.id,
            )
        if status == _vorifast.STATUS_DIVERGED:
            raise DivergenceError(
                f"subject {subject.id}: trajectory diverged at theta={theta}",
                theta=theta,
                subject_id=subject.id,
            )

    def _predict_generic(self, theta: np.ndarray, subject: SubjectRecord) -> np.ndarray:
        if not self.theta_valid(theta):
            raise ModelEvaluationError(
                f"subject {subject.id}: invalid parameters {theta}", theta=theta, subject_id=subject.id
            )
        ka, vmax0, km, vc0, fa1, kcp, kpc = theta
        wt = self._weight(subject)
        vm = vmax0 * wt**0.75
        vol = vc0 * wt

        def rhs(t: float, x: np.ndarray, r: np.ndarray) -> np.ndarray:
            mm = vm * x[1] / (km * vol + x[1])
            return np.array(
                [
                    -ka * x[0] + r[0],
                    ka * x[0] + r[1] - mm - kcp * x[1] + kpc * x[2],
                    kcp * x[1] - kpc * x[2] + r[2],
                ]
            )

        boluses = [
            odesolve.BolusJump(d.time, np.array([d.amount * fa1, 0.0, 0.0]))
            for d in subject.doses
            if d.is_bolus
        ]
        infusions = [
            odesolve.InfusionSegment(d.time, d.time + d.duration, np.array([0.0, d.amount / d.duration, 0.0]))
            for d in subject.doses
            if not d.is_bolus
        ]
        problem = odesolve.OdeProblem(
            dimension=3,
            rhs=rhs,
            x0=np.zeros(3),
            t0=0.0,
            t_end=float(subject.times[-1]),
            output_times=subject.times,
            boluses=boluses,
            infusions=infusions,
        )
        try:
            states = odesolve.integrate(problem, self.solver)
        except (StepLimitError, DivergenceError) as exc:
            exc.theta = theta
            exc.subject_id = subject.id
            raise
        return states[:, 1] / vol
