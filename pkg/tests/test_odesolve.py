"""Adaptive integrator: accuracy against closed forms, event semantics."""

import math

import numpy as np
import pytest
from scipy.linalg import expm

from rpem.core import DivergenceError, StepLimitError
from rpem.odesolve import BolusJump, InfusionSegment, OdeProblem, SolverConfig, integrate


def scalar_decay_problem(outputs=(1.0,)):
    return OdeProblem(
        dimension=1,
        rhs=lambda t, x, r: -x + r,
        x0=np.array([1.0]),
        t0=0.0,
        t_end=max(outputs),
        output_times=outputs,
    )


def two_compartment_problem(outputs):
    # dx/dt = A x with transfer k12/k21 and elimination ke from compartment 1
    k12, k21, ke = 1.75, 1.38, 0.5
    A = np.array([[-(k12 + ke), k21], [k12, -k21]])
    problem = OdeProblem(
        dimension=2,
        rhs=lambda t, x, r: A @ x + r,
        x0=np.array([1.0, 0.0]),
        t0=0.0,
        t_end=max(outputs),
        output_times=outputs,
    )
    return problem, A


class TestAccuracy:
    def test_scalar_exponential_decay(self):
        got = integrate(scalar_decay_problem((1.0,)), SolverConfig())
        assert got[0, 0] == pytest.approx(math.exp(-1.0), abs=1e-6)

    def test_two_compartment_matches_matrix_exponential(self):
        outputs = (1.0, 2.0, 4.0)
        problem, A = two_compartment_problem(outputs)
        got = integrate(problem, SolverConfig(rtol=1e-6, atol=1e-6))
        for row, t in zip(got, outputs):
            oracle = expm(A * t) @ problem.x0
            np.testing.assert_allclose(row, oracle, atol=1e-5)

    def test_constant_infusion_is_exact(self):
        problem = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: r,
            x0=np.zeros(1),
            t0=0.0,
            t_end=2.0,
            output_times=(2.0,),
            infusions=[InfusionSegment(0.0, 2.0, np.array([180.0 / 2.0]))],
        )
        got = integrate(problem, SolverConfig())
        assert got[0, 0] == pytest.approx(180.0, abs=1e-8)

    def test_halving_tolerances_never_increases_error(self):
        outputs = (1.0, 2.0, 4.0)
        problem, A = two_compartment_problem(outputs)
        oracle = np.array([expm(A * t) @ problem.x0 for t in outputs])
        errors = []
        tol = 1e-4
        while tol >= 1e-9:
            got = integrate(problem, SolverConfig(rtol=tol, atol=tol))
            errors.append(float(np.max(np.abs(got - oracle))))
            tol /= 2
        for coarse, fine in zip(errors, errors[1:]):
            assert fine <= coarse * (1 + 1e-9) + 1e-15


class TestEvents:
    def test_bolus_restart_matches_manual_two_stage_run(self):
        # integrating across the jump must equal integrating to it, adding the
        # jump, and integrating onward in a fresh call
        jump = np.array([0.5])
        full = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: -x,
            x0=np.array([1.0]),
            t0=0.0,
            t_end=2.0,
            output_times=(0.5, 1.0, 1.5, 2.0),
            boluses=[BolusJump(1.0, jump)],
        )
        config = SolverConfig()
        got = integrate(full, config)

        first = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: -x,
            x0=np.array([1.0]),
            t0=0.0,
            t_end=1.0,
            output_times=(0.5, 1.0),
        )
        part1 = integrate(first, config)
        second = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: -x,
            x0=part1[-1] + jump,
            t0=1.0,
            t_end=2.0,
            output_times=(1.5, 2.0),
        )
        part2 = integrate(second, config)
        manual = np.vstack([part1, part2])
        assert np.array_equal(got, manual)

    def test_output_at_bolus_time_reports_pre_jump_state(self):
        problem = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: np.zeros(1),
            x0=np.array([1.0]),
            t0=0.0,
            t_end=2.0,
            output_times=(1.0, 2.0),
            boluses=[BolusJump(1.0, np.array([5.0]))],
        )
        got = integrate(problem, SolverConfig())
        assert got[0, 0] == pytest.approx(1.0)  # before the jump
        assert got[1, 0] == pytest.approx(6.0)  # after it

    def test_overlapping_infusions_are_additive(self):
        problem = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: r,
            x0=np.zeros(1),
            t0=0.0,
            t_end=3.0,
            output_times=(3.0,),
            infusions=[
                InfusionSegment(0.0, 2.0, np.array([1.0])),
                InfusionSegment(1.0, 3.0, np.array([2.0])),
            ],
        )
        got = integrate(problem, SolverConfig())
        assert got[0, 0] == pytest.approx(2.0 + 4.0, abs=1e-10)

    def test_output_at_t0_is_initial_state(self):
        problem = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: -x,
            x0=np.array([3.0]),
            t0=0.0,
            t_end=1.0,
            output_times=(0.0, 1.0),
            boluses=[BolusJump(0.0, np.array([1.0]))],
        )
        got = integrate(problem, SolverConfig())
        assert got[0, 0] == pytest.approx(3.0)  # pre-dose
        assert got[1, 0] == pytest.approx(4.0 * math.exp(-1.0), abs=1e-6)


class TestMassConservation:
    def test_three_state_transfer_conserves_total_mass(self):
        # absorption plus inter-compartment transfer, no elimination: the rhs
        # has a linear invariant, so total mass tracks the dosed amount
        ka, kcp, kpc = 2.26, 1.75, 1.38

        def rhs(t, x, r):
            return np.array(
                [-ka * x[0] + r[0], ka * x[0] + r[1] - kcp * x[1] + kpc * x[2], kcp * x[1] - kpc * x[2] + r[2]]
            )

        problem = OdeProblem(
            dimension=3,
            rhs=rhs,
            x0=np.zeros(3),
            t0=0.0,
            t_end=48.0,
            output_times=tuple(np.arange(2.0, 49.0, 2.0)),
            boluses=[BolusJump(24.0, np.array([180.0, 0.0, 0.0]))],
            infusions=[InfusionSegment(0.0, 2.0, np.array([0.0, 90.0, 0.0]))],
        )
        states = integrate(problem, SolverConfig(rtol=1e-6, atol=1e-6))
        times = problem.output_times
        # outputs at the bolus time report the pre-jump state
        dosed = np.where(times < 2.0, 90.0 * times, 180.0) + np.where(times > 24.0, 180.0, 0.0)
        np.testing.assert_allclose(states.sum(axis=1), dosed, atol=1e-6)


class TestFailures:
    def test_step_limit(self):
        with pytest.raises(StepLimitError):
            integrate(scalar_decay_problem((1.0,)), SolverConfig(max_steps=3))

    def test_divergence(self):
        problem = OdeProblem(
            dimension=1,
            rhs=lambda t, x, r: x * x,
            x0=np.array([3.0]),
            t0=0.0,
            t_end=2.0,  # finite-time blowup at t = 1/3
            output_times=(2.0,),
        )
        with pytest.raises((DivergenceError, StepLimitError)):
            integrate(problem, SolverConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(rtol=0.0)
        with pytest.raises(ValueError):
            SolverConfig(max_steps=0)
