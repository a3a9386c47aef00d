"""Dynamics closed forms against independent oracles.

The mass matrix and forcing are hard-coded expressions; the committed
symbolic derivation (tools/derive_dynamics.py) produced the frozen
pinned-state numbers below, and the finite-difference and energy
checks here validate the implementation numerically without trusting
those expressions.
"""

import math

import numpy as np
import pytest

from wipbot import model
from wipbot.errors import ValidationError
from wipbot.model import (
    GeneralizedState,
    LqrState,
    energies,
    forcing,
    forward_dynamics,
    linearize,
    mass_matrix,
    wrap_angle,
)
from wipbot.params import BodyPoint, default_params


@pytest.fixture(scope="module")
def params():
    return default_params()


class _StubParams:
    """Duck-typed parameter stand-in so tests can pin exact numbers."""

    def __init__(self, m_b, l, i_roll, i_pitch, i_yaw, m_w, i_wa, r, w,
                 g=9.81):
        self.wheel_mass = m_w
        self.wheel_inertia_spin = i_wa
        self.wheel_radius = r
        self.track_width = w
        self.gravity = g
        self.leg_height_range = (0.05, 0.60)
        self._pt = BodyPoint(m_b, l, i_pitch, i_roll, i_yaw)

    def body_mass_fn(self, h):
        return self._pt


# the exact parameter/state pin used by the symbolic derivation tool
_PIN = _StubParams(m_b=8.3818, l=0.21, i_roll=0.1557, i_pitch=0.1291,
                   i_yaw=0.1704, m_w=1.0090911, i_wa=0.0040868,
                   r=0.09, w=0.36)
_PIN_STATE = GeneralizedState(np.array([0.3, 0.0, 0.0]),
                              np.array([-0.7, 1.2, 0.9]))
_PIN_U = (0.8, -0.5)
# frozen output of tools/derive_dynamics.py at the pin
_PIN_M = np.array([
    [0.49873738, 1.681562270756131, 0.0],
    [1.681562270756131, 11.40906861975309, 0.0],
    [0.0, 0.0, 0.3035677628916349],
])
_PIN_F = np.array([4.884016863264631, 4.0095519495503,
                   -3.035521605935964])


def _rk4_step(state, u, params, h, dt):
    """One fixed-height RK4 step through the public dynamics."""
    def rate(q, qd):
        st = GeneralizedState(q, qd)
        return qd, forward_dynamics(st, u, params, h)

    q, qd = state.q, state.q_dot
    k1q, k1v = rate(q, qd)
    k2q, k2v = rate(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v)
    k3q, k3v = rate(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v)
    k4q, k4v = rate(q + dt * k3q, qd + dt * k3v)
    qn = q + dt * (k1q + 2 * k2q + 2 * k3q + k4q) / 6.0
    vn = qd + dt * (k1v + 2 * k2v + 2 * k3v + k4v) / 6.0
    return GeneralizedState(qn, vn)


class TestWrapAngle:
    def test_identity_inside_band(self):
        for a in [-3.0, -0.5, 0.0, 1.2, math.pi]:
            assert wrap_angle(a) == pytest.approx(a)

    def test_wraps_multiples(self):
        assert wrap_angle(math.pi + 0.1) == pytest.approx(-math.pi + 0.1)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(7 * math.pi) == pytest.approx(math.pi)


class TestMassMatrix:
    def test_symmetric_positive_definite_everywhere(self, params):
        rng = np.random.default_rng(11)
        lo, hi = params.leg_height_range
        for _ in range(10_000):
            theta = rng.uniform(-math.pi, math.pi)
            h = rng.uniform(lo, hi)
            st = GeneralizedState(np.array([theta, 0.0, 0.0]), np.zeros(3))
            M = mass_matrix(st, params, h)
            assert np.allclose(M, M.T)
            assert np.linalg.eigvalsh(M)[0] > 0

    def test_massless_wheels_leave_pendulum_row(self):
        stub = _StubParams(m_b=8.3818, l=0.21, i_roll=0.1557,
                           i_pitch=0.1291, i_yaw=0.1704, m_w=0.0,
                           i_wa=0.0, r=0.09, w=0.36)
        st = GeneralizedState.at_rest()
        M = mass_matrix(st, stub, 0.3)
        assert M[1, 1] == pytest.approx(8.3818, rel=1e-12)

    def test_translation_inertia_at_upright(self, params):
        st = GeneralizedState.at_rest()
        h = 0.30
        M = mass_matrix(st, params, h)
        expected = (params.total_mass
                    + 2 * params.wheel_inertia_spin / params.wheel_radius**2)
        assert M[1, 1] == pytest.approx(expected, rel=1e-12)

    def test_pinned_state_matches_symbolic_tool(self):
        M = mass_matrix(_PIN_STATE, _PIN, 0.3)
        assert np.allclose(M, _PIN_M, rtol=1e-12, atol=1e-14)

    def test_height_out_of_range_rejected(self, params):
        st = GeneralizedState.at_rest()
        lo, hi = params.leg_height_range
        with pytest.raises(ValidationError):
            mass_matrix(st, params, hi + 0.05)
        with pytest.raises(ValidationError):
            mass_matrix(st, params, lo - 0.05)


class TestForcing:
    def test_upright_equilibrium_is_stationary(self, params):
        st = GeneralizedState.at_rest()
        f = forcing(st, (0.0, 0.0), params, 0.3)
        assert np.allclose(f, 0.0, atol=1e-15)

    def test_gravity_term_matches_potential_gradient(self, params):
        # -dV/dtheta by central difference is the independent oracle
        h, eps = 0.3, 1e-6
        for theta in [0.01, 0.2, -0.35, 1.1]:
            st = GeneralizedState(np.array([theta, 0, 0]), np.zeros(3))
            f = forcing(st, (0.0, 0.0), params, h)
            vp = energies(GeneralizedState(np.array([theta + eps, 0, 0]),
                                           np.zeros(3)), params, h)[1]
            vm = energies(GeneralizedState(np.array([theta - eps, 0, 0]),
                                           np.zeros(3)), params, h)[1]
            assert f[0] == pytest.approx(-(vp - vm) / (2 * eps), rel=1e-8)

    def test_symmetric_torque_drives_travel_only(self, params):
        st = GeneralizedState.at_rest()
        tau = 0.9
        f = forcing(st, (tau, tau), params, 0.3)
        assert f[1] == pytest.approx(2 * tau / params.wheel_radius,
                                     rel=1e-12)
        assert f[2] == pytest.approx(0.0, abs=1e-15)

    def test_antisymmetric_torque_drives_heading_only(self, params):
        st = GeneralizedState.at_rest()
        tau = 0.9
        f = forcing(st, (-tau, tau), params, 0.3)
        assert f[0] == pytest.approx(0.0, abs=1e-15)
        assert f[1] == pytest.approx(0.0, abs=1e-15)
        expected = params.track_width * tau / params.wheel_radius
        assert f[2] == pytest.approx(expected, rel=1e-12)

    def test_pinned_state_matches_symbolic_tool(self):
        f = forcing(_PIN_STATE, _PIN_U, _PIN, 0.3)
        assert np.allclose(f, _PIN_F, rtol=1e-12, atol=1e-14)


class TestForwardDynamics:
    def test_equilibrium_stays_put(self, params):
        st = GeneralizedState.at_rest()
        qdd = forward_dynamics(st, (0.0, 0.0), params, 0.25)
        assert np.allclose(qdd, 0.0, atol=1e-15)

    def test_tipped_body_falls_further(self, params):
        st = GeneralizedState(np.array([0.1, 0, 0]), np.zeros(3))
        qdd = forward_dynamics(st, (0.0, 0.0), params, 0.3)
        assert qdd[0] > 0

    def test_differential_torque_only_turns(self, params):
        st = GeneralizedState.at_rest()
        qdd = forward_dynamics(st, (-0.4, 0.4), params, 0.3)
        assert qdd[2] != 0
        assert qdd[0] == pytest.approx(0.0, abs=1e-14)
        assert qdd[1] == pytest.approx(0.0, abs=1e-14)

    def test_consistent_with_mass_matrix_solve(self, params):
        rng = np.random.default_rng(5)
        lo, hi = params.leg_height_range
        for _ in range(50):
            st = GeneralizedState(rng.normal(0, 1, 3), rng.normal(0, 1, 3))
            u = tuple(rng.uniform(-3.5, 3.5, 2))
            h = rng.uniform(lo, hi)
            qdd = forward_dynamics(st, u, params, h)
            M = mass_matrix(st, params, h)
            f = forcing(st, u, params, h)
            assert np.allclose(M @ qdd, f, rtol=1e-10, atol=1e-12)


class TestEnergies:
    def test_rest_has_no_kinetic_energy(self, params):
        t, v = energies(GeneralizedState.at_rest(0.4), params, 0.3)
        assert t == 0.0

    def test_upside_down_potential_gap(self, params):
        h = 0.3
        pt = params.body_mass_fn(h)
        up = energies(GeneralizedState.at_rest(0.0), params, h)[1]
        down = energies(GeneralizedState.at_rest(math.pi), params, h)[1]
        expected = 2 * pt.mass * params.gravity * pt.length
        assert up - down == pytest.approx(expected, rel=1e-12)

    def test_kinetic_energy_nonnegative(self, params):
        rng = np.random.default_rng(17)
        for _ in range(300):
            st = GeneralizedState(rng.normal(0, 2, 3), rng.normal(0, 3, 3))
            t, _ = energies(st, params, 0.25)
            assert t >= 0

    def test_unactuated_rollout_conserves_energy(self, params):
        # exercises the pitch-travel coupling and both yaw coupling
        # terms at once; the workless pair must not leak energy
        h, dt = 0.30, 1e-3
        st = GeneralizedState(np.array([0.25, 0.0, 0.0]),
                              np.array([0.5, 0.8, 1.2]))
        e0 = sum(energies(st, params, h))
        scale = max(abs(e0), energies(st, params, h)[0])
        worst = 0.0
        for _ in range(10_000):
            st = _rk4_step(st, (0.0, 0.0), params, h, dt)
            drift = abs(sum(energies(st, params, h)) - e0) / scale
            worst = max(worst, drift)
        assert worst < 1e-6

    def test_power_balance_along_flow(self, params):
        # d(T+V)/dt = 0 with u=0 at random states (finite differences
        # along two tiny exact-flow steps)
        rng = np.random.default_rng(23)
        h, delta = 0.3, 1e-5
        for _ in range(20):
            st = GeneralizedState(rng.normal(0, 1, 3),
                                  rng.normal(0, 1.5, 3))
            fwd = _rk4_step(st, (0.0, 0.0), params, h, delta)
            back = _rk4_step(st, (0.0, 0.0), params, h, -delta)
            e_f = sum(energies(fwd, params, h))
            e_b = sum(energies(back, params, h))
            scale = max(1.0, abs(sum(energies(st, params, h))))
            assert abs(e_f - e_b) / (2 * delta) < 1e-8 * scale * 100


class TestLinearize:
    def test_open_loop_unstable(self, params):
        ssm = linearize(params, 0.3, 0.005)
        assert np.max(np.linalg.eigvals(ssm.A).real) > 0

    def test_jacobian_matches_finite_differences(self, params):
        h, eps = 0.30, 1e-6
        ssm = linearize(params, h, 0.005)

        def xdot(x, u):
            st = GeneralizedState(np.array([x[0], 0.0, 0.0]),
                                  np.array([x[1], x[2], x[3]]))
            qdd = forward_dynamics(st, u, params, h)
            return np.array([x[1], qdd[0], qdd[1], qdd[2]])

        A_fd = np.zeros((4, 4))
        for j in range(4):
            dx = np.zeros(4)
            dx[j] = eps
            A_fd[:, j] = (xdot(dx, (0, 0)) - xdot(-dx, (0, 0))) / (2 * eps)
        B_fd = np.zeros((4, 2))
        for j in range(2):
            du = np.zeros(2)
            du[j] = eps
            B_fd[:, j] = (xdot(np.zeros(4), du)
                          - xdot(np.zeros(4), -du)) / (2 * eps)

        rel_a = (np.abs(A_fd - ssm.A).max() / np.abs(ssm.A).max())
        rel_b = (np.abs(B_fd - ssm.B).max() / np.abs(ssm.B).max())
        assert rel_a < 1e-4
        assert rel_b < 1e-4

    def test_discretization_limits(self, params):
        tiny = linearize(params, 0.3, 1e-12)
        assert np.abs(tiny.F - np.eye(4)).max() < 1e-10
        assert np.abs(tiny.G).max() < 1e-10

    def test_zoh_first_order_consistency(self, params):
        dt = 1e-4
        ssm = linearize(params, 0.3, dt)
        assert np.abs(ssm.F - (np.eye(4) + ssm.A * dt)).max() < 1e-6
        assert np.abs(ssm.G - ssm.B * dt).max() < 1e-6

    def test_anchor_and_validation(self, params):
        ssm = linearize(params, 0.35, 0.005)
        assert ssm.height_anchor == 0.35
        assert ssm.dt == 0.005
        with pytest.raises(ValidationError):
            linearize(params, 0.35, 0.0)
        with pytest.raises(ValidationError):
            linearize(params, 99.0, 0.005)

    def test_input_symmetry_structure(self, params):
        ssm = linearize(params, 0.3, 0.005)
        # torque sum moves pitch/travel rows equally, difference only yaw
        assert ssm.B[1, 0] == pytest.approx(ssm.B[1, 1], rel=1e-12)
        assert ssm.B[2, 0] == pytest.approx(ssm.B[2, 1], rel=1e-12)
        assert ssm.B[3, 0] == pytest.approx(-ssm.B[3, 1], rel=1e-12)
        assert ssm.B[0, 0] == 0.0


class TestStateTypes:
    def test_generalized_state_wraps_pitch(self):
        st = GeneralizedState(np.array([math.pi + 0.2, 1.0, 2.0]),
                              np.zeros(3))
        assert st.q[0] == pytest.approx(-math.pi + 0.2)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            GeneralizedState(np.array([np.nan, 0, 0]), np.zeros(3))

    def test_rejects_bad_shape(self):
        with pytest.raises(ValidationError):
            GeneralizedState(np.zeros(4), np.zeros(3))

    def test_lqr_state_from_generalized(self):
        st = GeneralizedState(np.array([0.1, 5.0, 2.0]),
                              np.array([0.2, 0.7, -0.3]))
        x = LqrState.from_generalized(st).x
        assert np.allclose(x, [0.1, 0.2, 0.7, -0.3])
