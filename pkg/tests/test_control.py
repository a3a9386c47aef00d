"""Riccati solver, gain schedule, and control law checks.

The scalar golden-ratio case is the hand-solvable oracle: with
F=G=Q=R=1 the fixed point satisfies s^2 - s - 1 = 0, so
S = (1+sqrt(5))/2 and K = S/(1+S) = 1/S.  Matrix instances are checked
against their own residual, eigenvalue stability, and scipy's
independent solver.
"""

import math
import time

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from wipbot import model
from wipbot.control import (
    DEFAULT_WEIGHTS,
    GainSchedule,
    LqrWeights,
    MAX_ANGULAR_VELOCITY,
    MAX_LINEAR_VELOCITY,
    VelocitySetpoint,
    build_schedule,
    control_law,
    dare_residual,
    interpolate_gain,
    lqr_gain,
    solve_dare,
)
from wipbot.errors import DareSolverError, ValidationError
from wipbot.model import LqrState
from wipbot.params import default_params

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


@pytest.fixture(scope="module")
def params():
    return default_params()


@pytest.fixture(scope="module")
def schedule(params):
    return build_schedule(params, DEFAULT_WEIGHTS, n_heights=10)


def _random_stabilizable(rng, n=4, m=2):
    for _ in range(100):
        F = rng.normal(0.0, 0.6, (n, n))
        G = rng.normal(0.0, 1.0, (n, m))
        ctrb = np.hstack([np.linalg.matrix_power(F, k) @ G
                          for k in range(n)])
        if np.linalg.matrix_rank(ctrb) == n:
            return F, G
    raise AssertionError("could not draw a controllable pair")


class TestSolveDare:
    @pytest.mark.parametrize("method", ["doubling", "iteration"])
    def test_scalar_golden_ratio(self, method):
        S = solve_dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1),
                       method=method)
        assert S[0, 0] == pytest.approx(1.6180340, abs=1e-6)
        assert S[0, 0] == pytest.approx(GOLDEN, abs=1e-9)

    def test_zero_plant_returns_state_weight(self):
        rng = np.random.default_rng(3)
        Q = np.diag(rng.uniform(0.1, 5.0, 4))
        S = solve_dare(np.zeros((4, 4)), np.ones((4, 2)), Q, np.eye(2))
        assert np.allclose(S, Q, atol=1e-12)

    @pytest.mark.parametrize("method", ["doubling", "iteration"])
    def test_random_instances_meet_residual(self, method):
        rng = np.random.default_rng(11)
        for _ in range(25):
            F, G = _random_stabilizable(rng)
            Q = np.diag(rng.uniform(0.0, 4.0, 4))
            R = np.diag(rng.uniform(0.2, 3.0, 2))
            S = solve_dare(F, G, Q, R, method=method)
            assert dare_residual(F, G, Q, R, S) < 1e-9
            assert np.allclose(S, S.T, atol=1e-12)
            assert np.linalg.eigvalsh(S)[0] >= -1e-12

    def test_matches_scipy_solver(self):
        rng = np.random.default_rng(29)
        for _ in range(10):
            F, G = _random_stabilizable(rng)
            Q = np.diag(rng.uniform(0.1, 4.0, 4))
            R = np.diag(rng.uniform(0.5, 3.0, 2))
            ours = solve_dare(F, G, Q, R)
            ref = solve_discrete_are(F, G, Q, R)
            assert np.allclose(ours, ref, rtol=1e-7, atol=1e-9)

    def test_methods_agree(self):
        rng = np.random.default_rng(41)
        F, G = _random_stabilizable(rng)
        Q, R = np.eye(4), np.eye(2)
        a = solve_dare(F, G, Q, R, method="doubling")
        b = solve_dare(F, G, Q, R, method="iteration")
        assert np.allclose(a, b, rtol=1e-8, atol=1e-10)

    def test_indefinite_r_rejected(self):
        with pytest.raises(ValidationError):
            solve_dare(np.eye(4), np.ones((4, 2)), np.eye(4),
                       np.diag([1.0, 0.0]))

    def test_unstabilizable_pair_raises(self):
        with pytest.raises(DareSolverError):
            solve_dare(2.0 * np.eye(4), np.zeros((4, 2)), np.eye(4),
                       np.eye(2))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            solve_dare(np.eye(4), np.ones((3, 2)), np.eye(4), np.eye(2))

    def test_unknown_method_rejected(self):
        with pytest.raises(ValidationError):
            solve_dare(np.eye(2), np.eye(2), np.eye(2), np.eye(2),
                       method="newton")

    def test_thousand_solves_stay_fast(self):
        rng = np.random.default_rng(53)
        systems = []
        for _ in range(1000):
            F, G = _random_stabilizable(rng)
            systems.append((F, G, np.diag(rng.uniform(0.1, 3.0, 4)),
                            np.diag(rng.uniform(0.5, 2.0, 2))))
        start = time.perf_counter()
        for F, G, Q, R in systems:
            solve_dare(F, G, Q, R)
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0


class TestLqrGain:
    def test_scalar_golden_ratio_gain(self):
        S = solve_dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
        K = lqr_gain(np.eye(1), np.eye(1), np.eye(1), S)
        assert K[0, 0] == pytest.approx(0.6180340, abs=1e-6)
        assert K[0, 0] == pytest.approx(1.0 / GOLDEN, abs=1e-9)

    def test_zero_cost_to_go_means_zero_gain(self):
        K = lqr_gain(np.eye(4), np.ones((4, 2)), np.eye(2),
                     np.zeros((4, 4)))
        assert np.allclose(K, 0.0)

    def test_closed_loop_stable_on_random_instances(self):
        rng = np.random.default_rng(61)
        for _ in range(20):
            F, G = _random_stabilizable(rng)
            Q = np.diag(rng.uniform(0.1, 3.0, 4))
            R = np.diag(rng.uniform(0.5, 2.0, 2))
            S = solve_dare(F, G, Q, R)
            K = lqr_gain(F, G, R, S)
            rho = np.max(np.abs(np.linalg.eigvals(F - G @ K)))
            assert rho < 1.0


class TestBuildSchedule:
    def test_ten_equally_spaced_anchors(self, params, schedule):
        lo, hi = params.leg_height_range
        assert len(schedule.heights) == 10
        assert schedule.heights[0] == pytest.approx(lo)
        assert schedule.heights[-1] == pytest.approx(hi)
        gaps = np.diff(schedule.heights)
        assert np.allclose(gaps, (hi - lo) / 9.0, rtol=1e-12)

    def test_every_anchor_stabilizes_its_plant(self, params, schedule):
        for h, K in schedule.anchors:
            ssm = model.linearize(params, h, schedule.dt)
            rho = np.max(np.abs(np.linalg.eigvals(ssm.F - ssm.G @ K)))
            assert rho < 1.0

    def test_two_anchor_schedule_is_endpoints(self, params):
        sched = build_schedule(params, DEFAULT_WEIGHTS, n_heights=2)
        lo, hi = params.leg_height_range
        assert np.allclose(sched.heights, [lo, hi])

    def test_rejects_single_anchor_request(self, params):
        with pytest.raises(ValidationError):
            build_schedule(params, DEFAULT_WEIGHTS, n_heights=1)

    def test_schedule_serializes(self, schedule):
        d = schedule.to_dict()
        assert len(d["anchors"]) == 10
        assert d["anchors"][0]["height"] == pytest.approx(
            schedule.heights[0])
        assert np.asarray(d["anchors"][3]["gain"]).shape == (2, 4)


class TestInterpolateGain:
    def test_exact_at_anchors(self, schedule):
        for h, K in schedule.anchors:
            assert np.allclose(interpolate_gain(schedule, h), K,
                               atol=1e-12)

    def test_midpoint_is_entrywise_mean(self, schedule):
        h0, h1 = schedule.heights[4], schedule.heights[5]
        K = interpolate_gain(schedule, 0.5 * (h0 + h1))
        expected = 0.5 * (schedule.gains[4] + schedule.gains[5])
        assert np.allclose(K, expected, rtol=1e-12)

    def test_clamps_outside_range(self, schedule):
        low = interpolate_gain(schedule, schedule.heights[0] - 1.0)
        high = interpolate_gain(schedule, schedule.heights[-1] + 1.0)
        assert np.allclose(low, schedule.gains[0])
        assert np.allclose(high, schedule.gains[-1])

    def test_continuous_in_height(self, schedule):
        gaps = np.diff(schedule.heights)
        lips = max(np.abs(schedule.gains[i + 1] - schedule.gains[i]).max()
                   / gaps[i] for i in range(len(gaps)))
        rng = np.random.default_rng(5)
        lo, hi = schedule.heights[0], schedule.heights[-1]
        for h in rng.uniform(lo, hi - 1e-4, 40):
            d = 1e-5
            jump = np.abs(interpolate_gain(schedule, h + d)
                          - interpolate_gain(schedule, h)).max()
            assert jump <= lips * d * (1 + 1e-9)

    def test_interpolated_gains_stabilize_between_anchors(self, params,
                                                          schedule):
        # stability between anchors is empirical, so sample it
        rng = np.random.default_rng(97)
        lo, hi = params.leg_height_range
        for h in rng.uniform(lo, hi, 50):
            K = interpolate_gain(schedule, float(h))
            ssm = model.linearize(params, float(h), schedule.dt)
            rho = np.max(np.abs(np.linalg.eigvals(ssm.F - ssm.G @ K)))
            assert rho < 1.0


class TestControlLaw:
    def test_zero_error_zero_torque(self, schedule):
        K = schedule.gains[3]
        x = LqrState(np.array([0.0, 0.0, 0.8, -0.2]))
        sp = VelocitySetpoint(v_ref=0.8, omega_ref=-0.2)
        assert np.allclose(control_law(K, x, sp), 0.0, atol=1e-12)

    def test_linear_below_saturation(self, schedule):
        K = schedule.gains[3]
        err = np.array([0.01, 0.02, -0.03, 0.01])
        sp = VelocitySetpoint()
        u1 = control_law(K, LqrState(err), sp)
        u2 = control_law(K, LqrState(2.0 * err), sp)
        assert np.max(np.abs(u2)) < 3.5          # still unsaturated
        assert np.allclose(u2, 2.0 * u1, rtol=1e-12)

    def test_saturates_at_torque_limit(self, schedule):
        K = schedule.gains[3]
        x = LqrState(np.array([1.0, 5.0, -4.0, 2.0]))
        u = control_law(K, x, VelocitySetpoint(), torque_limit=3.5)
        assert np.all(np.abs(u) <= 3.5)
        assert np.any(np.abs(u) == 3.5)

    def test_setpoint_limits_enforced(self):
        VelocitySetpoint(v_ref=MAX_LINEAR_VELOCITY)          # boundary ok
        VelocitySetpoint(omega_ref=-MAX_ANGULAR_VELOCITY)
        with pytest.raises(ValidationError):
            VelocitySetpoint(v_ref=3.0)
        with pytest.raises(ValidationError):
            VelocitySetpoint(omega_ref=1.2)
        with pytest.raises(ValidationError):
            VelocitySetpoint(v_ref=float("nan"))


class TestWeightValidation:
    def test_negative_state_weight_rejected(self):
        with pytest.raises(ValidationError):
            LqrWeights(q=np.array([-1.0, 1, 1, 1]), r=np.ones(2))

    def test_zero_input_weight_rejected(self):
        with pytest.raises(ValidationError):
            LqrWeights(q=np.ones(4), r=np.array([1.0, 0.0]))

    def test_weights_serialize(self):
        d = DEFAULT_WEIGHTS.to_dict()
        assert len(d["q"]) == 4 and len(d["r"]) == 2


class TestGainScheduleValidation:
    def test_rejects_unsorted_heights(self):
        with pytest.raises(ValidationError):
            GainSchedule(heights=np.array([0.3, 0.2]),
                         gains=np.zeros((2, 2, 4)), dt=0.005)

    def test_rejects_wrong_gain_shape(self):
        with pytest.raises(ValidationError):
            GainSchedule(heights=np.array([0.2, 0.3]),
                         gains=np.zeros((2, 4, 2)), dt=0.005)
