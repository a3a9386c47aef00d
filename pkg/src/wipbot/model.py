"""Rigid-body dynamics of the wheel-and-pendulum reduction.

The machine is reduced to three bodies: two wheels and one substitute
pendulum that stands in for torso plus legs at a given leg height h
(see `wipbot.params`).  Generalized coordinates:

    q = [theta, s, gamma]

theta  body pitch from vertical (positive tips forward),
s      distance traveled along the ground path,
gamma  heading.

The closed-form mass matrix and forcing below were derived by
projecting the full six-coordinate Lagrangian through the no-slip
constraint basis (rolling, no lateral slide, differential steering);
`tools/derive_dynamics.py` re-derives them symbolically and asserts
they match, including two easily-missed workless coupling terms:
turning with the CoM ahead of the axle surges the base forward, and
forward speed while turning back-reacts on yaw.  The derivation text
lives in docs/dynamics_derivation.md.

Leg height h is a frozen parameter here, not a coordinate: all
operations describe the robot between leg motions.  The hip spring
stores energy only when h changes, so it contributes nothing at fixed
h and is accounted for by the simulator's extension dynamics instead.

All operations are pure functions; nothing here mutates shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import ValidationError
from .params import RobotParams


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True, eq=False)
class GeneralizedState:
    """Pitch/travel/heading coordinates and their rates."""

    q: np.ndarray       # [theta rad, s m, gamma rad]
    q_dot: np.ndarray   # time derivatives

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        qd = np.asarray(self.q_dot, dtype=float)
        if q.shape != (3,) or qd.shape != (3,):
            raise ValidationError("state vectors must have shape (3,)")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValidationError("state must be finite")
        q = q.copy()
        q[0] = wrap_angle(q[0])
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "q_dot", qd.copy())

    @classmethod
    def at_rest(cls, theta: float = 0.0) -> "GeneralizedState":
        return cls(np.array([theta, 0.0, 0.0]), np.zeros(3))


@dataclass(frozen=True, eq=False)
class LqrState:
    """Stabilizer state x = [theta, theta_dot, v, omega]."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.shape != (4,):
            raise ValidationError("LqrState must have shape (4,)")
        object.__setattr__(self, "x", x.copy())

    @classmethod
    def from_generalized(cls, state: GeneralizedState) -> "LqrState":
        th = state.q[0]
        thd, sd, gad = state.q_dot
        return cls(np.array([th, thd, sd, gad]))


@dataclass
class PlanarOdometry:
    """Dead-reckoned planar pose; s accumulates |v| dt."""

    x: float = 0.0
    y: float = 0.0
    gamma: float = 0.0
    s: float = 0.0


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Linearization anchored at one leg height.

    (A, B) are continuous-time over LqrState and the two wheel
    torques; (F, G) the zero-order-hold discretization at dt.
    """

    height_anchor: float
    dt: float
    A: np.ndarray   # 4x4
    B: np.ndarray   # 4x2
    F: np.ndarray   # 4x4
    G: np.ndarray   # 4x2


class BodyCoeffs:
    """Scalar dynamics coefficients at one leg height (hot path)."""

    __slots__ = ("m_b", "l", "a_s", "a_th", "b0", "k_g", "j_w", "d_i",
                 "gam0", "r", "half_w_over_r", "g")

    def __init__(self, params: RobotParams, h: float):
        pt = params.body_mass_fn(h)
        m_w = params.wheel_mass
        i_wa = params.wheel_inertia_spin
        i_wd = 0.5 * i_wa            # axisymmetric wheel: diametral = spin/2
        r = params.wheel_radius
        w = params.track_width
        self.m_b = pt.mass
        self.l = pt.length
        self.g = params.gravity
        self.r = r
        self.half_w_over_r = w / (2.0 * r)
        self.a_s = pt.mass + 2.0 * m_w + 2.0 * i_wa / r**2
        self.a_th = pt.mass * pt.length**2 + pt.i_pitch
        self.b0 = pt.mass * pt.length
        self.k_g = pt.mass * params.gravity * pt.length
        self.j_w = (m_w + i_wa / r**2) * w**2 / 2.0 + 2.0 * i_wd
        self.d_i = pt.mass * pt.length**2 + pt.i_roll - pt.i_yaw
        self.gam0 = self.j_w + pt.i_yaw


def _check_height(params: RobotParams, h: float) -> None:
    lo, hi = params.leg_height_range
    if not (lo - 1e-9 <= h <= hi + 1e-9):
        raise ValidationError(
            f"leg height {h:.4f} outside operating range "
            f"({lo:.4f}, {hi:.4f})")


def body_coeffs(params: RobotParams, h: float) -> BodyCoeffs:
    """Dynamics coefficients at leg height h (range-checked)."""
    _check_height(params, h)
    return BodyCoeffs(params, h)


def _mass(c: BodyCoeffs, theta: float) -> np.ndarray:
    b = c.b0 * math.cos(theta)
    gam = c.gam0 + c.d_i * math.sin(theta)**2
    return np.array([[c.a_th, b, 0.0],
                     [b, c.a_s, 0.0],
                     [0.0, 0.0, gam]])


def _forcing(c: BodyCoeffs, theta, theta_dot, s_dot, gamma_dot,
             tau_l, tau_r) -> np.ndarray:
    sin_t = math.sin(theta)
    sin_2t = math.sin(2.0 * theta)
    tau = tau_l + tau_r
    return np.array([
        c.k_g * sin_t + 0.5 * c.d_i * sin_2t * gamma_dot**2 - tau,
        c.b0 * sin_t * (theta_dot**2 + gamma_dot**2) + tau / c.r,
        -c.d_i * sin_2t * theta_dot * gamma_dot
        - c.b0 * sin_t * s_dot * gamma_dot
        + c.half_w_over_r * (tau_r - tau_l),
    ])


def _accel(c: BodyCoeffs, theta, theta_dot, s_dot, gamma_dot,
           tau_l, tau_r) -> np.ndarray:
    """q_ddot via the analytic 2x2-block inverse of M."""
    f = _forcing(c, theta, theta_dot, s_dot, gamma_dot, tau_l, tau_r)
    b = c.b0 * math.cos(theta)
    det = c.a_th * c.a_s - b * b     # > 0: M is SPD
    gam = c.gam0 + c.d_i * math.sin(theta)**2
    return np.array([
        (c.a_s * f[0] - b * f[1]) / det,
        (c.a_th * f[1] - b * f[0]) / det,
        f[2] / gam,
    ])


def mass_matrix(state: GeneralizedState, params: RobotParams,
                h: float) -> np.ndarray:
    """M(q) of M q_ddot = f; symmetric positive definite."""
    return _mass(body_coeffs(params, h), state.q[0])


def forcing(state: GeneralizedState, u, params: RobotParams,
            h: float) -> np.ndarray:
    """Right-hand side f: gravity, velocity coupling, motor torques.

    u = (left, right) wheel torque; the caller saturates to
    wheel_torque_limit before getting here.
    """
    c = body_coeffs(params, h)
    return _forcing(c, state.q[0], state.q_dot[0], state.q_dot[1],
                    state.q_dot[2], float(u[0]), float(u[1]))


def forward_dynamics(state: GeneralizedState, u, params: RobotParams,
                     h: float) -> np.ndarray:
    """Accelerations q_ddot = M^-1 f."""
    c = body_coeffs(params, h)
    return _accel(c, state.q[0], state.q_dot[0], state.q_dot[1],
                  state.q_dot[2], float(u[0]), float(u[1]))


def energies(state: GeneralizedState, params: RobotParams,
             h: float) -> tuple[float, float]:
    """(kinetic, potential) with V(theta=0) = 0 at any height."""
    c = body_coeffs(params, h)
    theta = state.q[0]
    thd, sd, gad = state.q_dot
    b = c.b0 * math.cos(theta)
    gam = c.gam0 + c.d_i * math.sin(theta)**2
    kinetic = (0.5 * c.a_s * sd**2 + b * sd * thd
               + 0.5 * c.a_th * thd**2 + 0.5 * gam * gad**2)
    potential = c.k_g * (math.cos(theta) - 1.0)
    return float(kinetic), float(potential)


def linearize(params: RobotParams, h: float, dt: float) -> StateSpaceModel:
    """Upright-equilibrium linearization over x = [theta, thd, v, omega].

    A and B are analytic; F and G come from the exact matrix
    exponential of the zero-order-hold block, so G = int_0^dt e^(A t) B.
    """
    if dt <= 0:
        raise ValidationError("dt must be > 0")
    c = body_coeffs(params, h)
    det = c.a_th * c.a_s - c.b0**2
    a21 = c.a_s * c.k_g / det
    a31 = -c.b0 * c.k_g / det
    b2 = -(c.a_s + c.b0 / c.r) / det
    b3 = (c.b0 + c.a_th / c.r) / det
    b4 = c.half_w_over_r / c.gam0
    A = np.array([[0.0, 1.0, 0.0, 0.0],
                  [a21, 0.0, 0.0, 0.0],
                  [a31, 0.0, 0.0, 0.0],
                  [0.0, 0.0, 0.0, 0.0]])
    B = np.array([[0.0, 0.0],
                  [b2, b2],
                  [b3, b3],
                  [-b4, b4]])
    block = np.zeros((6, 6))
    block[:4, :4] = A * dt
    block[:4, 4:] = B * dt
    phi = expm(block)
    return StateSpaceModel(height_anchor=h, dt=dt, A=A, B=B,
                           F=phi[:4, :4], G=phi[:4, 4:])
