"""LQR synthesis, height-scheduled gains, and the runtime control law.

The stabilizer solves one discrete-time Riccati equation per leg
height anchor and interpolates the resulting feedback gains linearly
in between.  Everything here is pure; the real-time loop calls
`interpolate_gain` + `control_law` with whatever estimate it has.

Velocity setpoint limits (2.22 m/s, 1.1 rad/s) are the machine's
rated maxima and are enforced at the type boundary, so a schedule
consumer can trust any `VelocitySetpoint` it is handed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import DareSolverError, ValidationError
from .params import RobotParams

MAX_LINEAR_VELOCITY = 2.22    # m/s
MAX_ANGULAR_VELOCITY = 1.1    # rad/s
DEFAULT_DT = 0.005            # s, 200 Hz control rate


@dataclass(frozen=True, eq=False)
class LqrWeights:
    """Diagonal state and input weights.

    q weighs [theta, theta_dot, v, omega] deviations, r the two wheel
    torques.  Stored as the diagonals.
    """

    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if q.shape != (4,) or r.shape != (2,):
            raise ValidationError("weights must be diagonals of 4x4 and 2x2")
        if np.any(q < 0):
            raise ValidationError("state weights must be >= 0")
        if np.any(r <= 0):
            raise ValidationError("input weights must be > 0")
        object.__setattr__(self, "q", q.copy())
        object.__setattr__(self, "r", r.copy())

    @property
    def q_matrix(self) -> np.ndarray:
        return np.diag(self.q)

    @property
    def r_matrix(self) -> np.ndarray:
        return np.diag(self.r)

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "r": self.r.tolist()}


# Repo-tuned to meet the stabilization/disturbance scenarios in the
# simulator; heavier pitch and velocity terms keep recovery travel
# short without hitting the 3.5 N m wheel saturation on a 5 deg drop.
DEFAULT_WEIGHTS = LqrWeights(q=np.array([60.0, 2.0, 30.0, 8.0]),
                             r=np.array([1.0, 1.0]))


@dataclass(frozen=True, eq=False)
class VelocitySetpoint:
    """Operator velocity request, validated against the rated maxima."""

    v_ref: float = 0.0
    omega_ref: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.v_ref)
                and math.isfinite(self.omega_ref)):
            raise ValidationError("setpoint must be finite")
        if abs(self.v_ref) > MAX_LINEAR_VELOCITY:
            raise ValidationError(
                f"|v_ref| exceeds {MAX_LINEAR_VELOCITY} m/s")
        if abs(self.omega_ref) > MAX_ANGULAR_VELOCITY:
            raise ValidationError(
                f"|omega_ref| exceeds {MAX_ANGULAR_VELOCITY} rad/s")


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Feedback gains anchored at equally spaced leg heights."""

    heights: np.ndarray   # (n,) m, strictly increasing
    gains: np.ndarray     # (n, 2, 4)
    dt: float             # s, design sample period

    def __post_init__(self):
        hs = np.asarray(self.heights, dtype=float)
        ks = np.asarray(self.gains, dtype=float)
        if hs.ndim != 1 or len(hs) < 1:
            raise ValidationError("schedule needs at least one anchor")
        if ks.shape != (len(hs), 2, 4):
            raise ValidationError("gains must have shape (n, 2, 4)")
        if len(hs) > 1 and not np.all(np.diff(hs) > 0):
            raise ValidationError("anchor heights must strictly increase")
        object.__setattr__(self, "heights", hs.copy())
        object.__setattr__(self, "gains", ks.copy())

    @property
    def anchors(self) -> list[tuple[float, np.ndarray]]:
        return [(float(h), k.copy())
                for h, k in zip(self.heights, self.gains)]

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "anchors": [{"height": float(h), "gain": k.tolist()}
                        for h, k in zip(self.heights, self.gains)],
        }


def dare_residual(F, G, Q, R, S) -> float:
    """Infinity norm of the Riccati fixed-point defect at S."""
    gsg = R + G.T @ S @ G
    gain_term = F.T @ S @ G @ np.linalg.solve(gsg, G.T @ S @ F)
    return float(np.abs(gain_term + S - F.T @ S @ F - Q).max())


def _validate_dare_inputs(F, G, Q, R):
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = F.shape[0]
    m = G.shape[1]
    if F.shape != (n, n) or G.shape != (n, m):
        raise ValidationError("F must be square and G conformable")
    if Q.shape != (n, n) or R.shape != (m, m):
        raise ValidationError("Q and R dimensions must match F and G")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ValidationError("R must be symmetric positive definite")
    return F, G, Q, R


def solve_dare(F, G, Q, R, tol: float = 1e-9, max_iter: int = 10_000,
               method: str = "doubling") -> np.ndarray:
    """Solve S = F'SF - F'SG (R + G'SG)^-1 G'SF + Q.

    `doubling` squares the closed-loop horizon each pass, so it
    converges in a few dozen steps; `iteration` is the plain
    value-recursion S <- Q + F'(S - S G (R+G'SG)^-1 G'S) F from S0=Q,
    kept as an independently simple cross-check.  Both exit through
    the same residual gate, so a returned S always satisfies the
    equation to `tol` in the infinity norm.
    """
    F, G, Q, R = _validate_dare_inputs(F, G, Q, R)
    n = F.shape[0]

    # stop once the iterate moves less than a slice of the (absolute)
    # residual tolerance, or has hit the float64 floor for its scale
    def _settled(inc, scale):
        return inc <= max(1e-2 * tol, 4e-16 * scale)

    if method == "doubling":
        A = F.copy()
        P = G @ np.linalg.solve(R, G.T)   # controllability-side term
        S = Q.copy()
        eye = np.eye(n)
        for _ in range(max_iter):
            with np.errstate(over="ignore", invalid="ignore"):
                ip = np.linalg.solve(eye + P @ S,
                                     np.column_stack((A, P)))
                ia = ip[:, :n]      # (I + P S)^-1 A
                ipp = ip[:, n:]     # (I + P S)^-1 P
                s_next = S + A.T @ S @ ia
                p_next = P + A @ ipp @ A.T
                a_next = A @ ia
            if not np.all(np.isfinite(s_next)):
                raise DareSolverError("doubling iteration diverged")
            done = _settled(np.abs(s_next - S).max(),
                            np.abs(s_next).max())
            A, P, S = a_next, p_next, s_next
            if done:
                break
        else:
            raise DareSolverError(
                f"no convergence in {max_iter} doubling steps")
    elif method == "iteration":
        S = Q.copy()
        for _ in range(max_iter):
            gsg = R + G.T @ S @ G
            s_next = Q + F.T @ (
                S - S @ G @ np.linalg.solve(gsg, G.T @ S)) @ F
            s_next = 0.5 * (s_next + s_next.T)
            if not np.all(np.isfinite(s_next)):
                raise DareSolverError("fixed-point iteration diverged")
            done = _settled(np.abs(s_next - S).max(),
                            np.abs(s_next).max())
            S = s_next
            if done:
                break
        else:
            raise DareSolverError(
                f"no convergence in {max_iter} fixed-point steps")
    else:
        raise ValidationError(f"unknown DARE method {method!r}")

    S = 0.5 * (S + S.T)
    res = dare_residual(F, G, Q, R, S)
    if not res < tol:
        raise DareSolverError(
            f"converged iterate fails the residual gate: {res:.3e}")
    return S


def lqr_gain(F, G, R, S) -> np.ndarray:
    """K = (R + G'SG)^-1 G'SF; u = -K x closes the loop."""
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    F = np.atleast_2d(np.asarray(F, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return np.linalg.solve(R + G.T @ S @ G, G.T @ S @ F)


def build_schedule(params: RobotParams, weights: LqrWeights = DEFAULT_WEIGHTS,
                   *, n_heights: int = 10, dt: float = DEFAULT_DT,
                   tol: float = 1e-9) -> GainSchedule:
    """Design gains at equally spaced leg heights across the range."""
    if n_heights < 2:
        raise ValidationError("n_heights must be >= 2")
    lo, hi = params.leg_height_range
    heights = np.linspace(lo, hi, n_heights)
    gains = np.empty((n_heights, 2, 4))
    for i, h in enumerate(heights):
        ssm = model.linearize(params, float(h), dt)
        try:
            S = solve_dare(ssm.F, ssm.G, weights.q_matrix,
                           weights.r_matrix, tol=tol)
        except DareSolverError as e:
            raise DareSolverError(
                f"anchor {i} at h={h:.4f} m: {e}") from e
        gains[i] = lqr_gain(ssm.F, ssm.G, weights.r_matrix, S)
    return GainSchedule(heights=heights, gains=gains, dt=dt)


def interpolate_gain(schedule: GainSchedule, h_hat: float) -> np.ndarray:
    """Entrywise linear gain between bracketing anchors, clamped."""
    hs = schedule.heights
    if h_hat <= hs[0]:
        return schedule.gains[0].copy()
    if h_hat >= hs[-1]:
        return schedule.gains[-1].copy()
    j = int(np.searchsorted(hs, h_hat))
    w = (h_hat - hs[j - 1]) / (hs[j] - hs[j - 1])
    return (1.0 - w) * schedule.gains[j - 1] + w * schedule.gains[j]


def control_law(K, x_hat: model.LqrState, setpoint: VelocitySetpoint,
                torque_limit: float = 3.5) -> np.ndarray:
    """u = -K (x_hat - x_ref), saturated entrywise.

    The reference state carries the velocity setpoint in its v and
    omega slots; regulating the error to zero and adding the setpoint
    to the measured state are the same operation up to sign.
    """
    x_ref = np.array([0.0, 0.0, setpoint.v_ref, setpoint.omega_ref])
    u = -np.asarray(K) @ (x_hat.x - x_ref)
    return np.clip(u, -torque_limit, torque_limit)
