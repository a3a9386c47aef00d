"""Kalman filter fusing IMU and encoder data into the control state.

The filter state is the LQR state x = [theta, theta_dot, v, omega].
Leg height is not filtered: it follows deterministically from the hip
encoders through the linkage table (`estimate_height`).

Measurement conventions, shared with the simulator's sensor model:

  - The IMU sits on the pendulum body, x forward, y along the axle to
    the left, z up.  At rest the accelerometer reads the reaction to
    gravity, `static_accel(theta, g) = (-g sin theta, 0, g cos theta)`,
    so pitch decodes as atan2(-a_x, a_z).  Away from rest that decode
    is biased; its noise is inflated as the accel norm leaves g, and
    the tilt row is dropped entirely while airborne.
  - The pitch gyro axis (y) reads theta_dot directly.
  - Wheel encoders measure wheel angle relative to the body, so ground
    speed needs the pitch rate added back: v = r(rate_l + rate_r)/2 +
    r*theta_dot.  Rates come from finite differences smoothed over two
    samples, which makes the speed rows trail truth by about one tick;
    that staleness is far below the encoder noise floor at the control
    rate and is ignored.
  - The shared gyro sample in the speed correction correlates the
    theta_dot and v rows, so the measurement covariance carries that
    off-diagonal term instead of pretending the rows are independent.

Every operation is pure: callers hold an `Estimate` and replace it
with the returned one.  One writer (the control loop) advances the
filter; any number of readers may keep snapshots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import model
from .errors import ValidationError
from .model import LqrState, PlanarOdometry
from .params import RobotParams

logger = logging.getLogger(__name__)

# ToF sentinel for "no return within range"
NO_RETURN = math.inf

# tilt variance multiplier grows as (1 + gain * |norm(accel)/g - 1|)^2
TILT_INFLATION_GAIN = 50.0

# pitch beyond which the upright linearization stops being a usable
# prediction model (fallen poses); predict() coasts instead
MODEL_VALIDITY_PITCH = 0.6

# variance floor keeping innovation covariance invertible at zero noise
_VAR_FLOOR = 1e-12

# per-step model uncertainty; absorbs linearization error at the 200 Hz
# control rate, scenario files may override
DEFAULT_PROCESS_NOISE = np.diag([1e-8, 1e-5, 1e-5, 1e-5])


@dataclass(frozen=True)
class NoiseConfig:
    """One-sigma sensor noise levels, shared by simulator and filter.

    `gyro_bias` and `encoder_ticks` matter only to the simulator's
    sensor model; the filter treats bias as part of the noise budget
    and quantization (0 = continuous encoders) as white.
    """

    accel_std: float = 0.05     # m/s^2 per axis
    gyro_std: float = 0.005     # rad/s per axis
    encoder_std: float = 0.001  # rad per sample
    tof_std: float = 0.01       # m
    gyro_bias: float = 0.0      # rad/s added to every gyro axis
    encoder_ticks: int = 0      # ticks per revolution, 0 = continuous

    def __post_init__(self):
        for name in ("accel_std", "gyro_std", "encoder_std", "tof_std"):
            s = getattr(self, name)
            if not (np.isfinite(s) and s >= 0.0):
                raise ValidationError(f"{name} must be finite and >= 0")
        if not np.isfinite(self.gyro_bias):
            raise ValidationError("gyro_bias must be finite")
        if self.encoder_ticks < 0 or self.encoder_ticks != int(
                self.encoder_ticks):
            raise ValidationError("encoder_ticks must be a count >= 0")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(accel_std=0.0, gyro_std=0.0, encoder_std=0.0,
                   tof_std=0.0)

    def to_dict(self) -> dict:
        return {"accel_std": self.accel_std, "gyro_std": self.gyro_std,
                "encoder_std": self.encoder_std,
                "tof_std": self.tof_std, "gyro_bias": self.gyro_bias,
                "encoder_ticks": self.encoder_ticks}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(**d)


def static_accel(theta: float, g: float) -> np.ndarray:
    """Accelerometer reading of a body at rest pitched by theta."""
    return np.array([-g * math.sin(theta), 0.0, g * math.cos(theta)])


@dataclass(frozen=True)
class SensorFrame:
    """One synchronized sample of every onboard sensor."""

    timestamp: float
    gyro: np.ndarray            # rad/s, body frame
    accel: np.ndarray           # m/s^2, body frame specific force
    wheel_angle_l: float        # rad, wheel relative to body
    wheel_angle_r: float
    hip_angle_l: float          # rad
    hip_angle_r: float
    tof_left: float = NO_RETURN     # m forward, inf = no return
    tof_right: float = NO_RETURN

    def __post_init__(self):
        gyro = np.asarray(self.gyro, dtype=float)
        accel = np.asarray(self.accel, dtype=float)
        if gyro.shape != (3,) or accel.shape != (3,):
            raise ValidationError("gyro and accel must be 3-vectors")
        scalars = (self.timestamp, self.wheel_angle_l, self.wheel_angle_r,
                   self.hip_angle_l, self.hip_angle_r)
        if not (np.all(np.isfinite(gyro)) and np.all(np.isfinite(accel))
                and all(np.isfinite(s) for s in scalars)):
            raise ValidationError("sensor frame contains non-finite values")
        for tof in (self.tof_left, self.tof_right):
            if math.isnan(tof) or tof < 0.0:
                raise ValidationError(
                    "ToF readings must be >= 0 or the no-return sentinel")
        object.__setattr__(self, "gyro", gyro)
        object.__setattr__(self, "accel", accel)


@dataclass(frozen=True)
class WheelRateTracker:
    """Finite-difference wheel rates with two-sample smoothing."""

    time: float
    angles: tuple[float, float]
    raw_rates: tuple[float, float] | None = None

    def advance(self, time: float, angle_l: float, angle_r: float):
        """Step to the next sample.

        Returns (tracker, (rate_l, rate_r), var_factor) where
        var_factor * encoder_std^2 / dt^2 is the rate variance: 2 for a
        single difference, 1/2 once two differences are averaged.
        """
        dt = time - self.time
        if dt <= 0.0:
            raise ValidationError("sensor timestamps must increase")
        raw = ((angle_l - self.angles[0]) / dt,
               (angle_r - self.angles[1]) / dt)
        if self.raw_rates is None:
            rates, var_factor = raw, 2.0
        else:
            rates = (0.5 * (raw[0] + self.raw_rates[0]),
                     0.5 * (raw[1] + self.raw_rates[1]))
            var_factor = 0.5
        nxt = WheelRateTracker(time=time, angles=(angle_l, angle_r),
                               raw_rates=raw)
        return nxt, rates, var_factor


@dataclass(frozen=True, eq=False)
class Estimate:
    x_hat: LqrState
    h_hat: float
    covariance: np.ndarray      # 4x4 SPD
    odom: PlanarOdometry
    wheels: WheelRateTracker | None = None

    def __post_init__(self):
        P = np.asarray(self.covariance, dtype=float)
        if P.shape != (4, 4):
            raise ValidationError("covariance must be 4x4")
        if not np.all(np.isfinite(P)) or not np.allclose(P, P.T,
                                                         atol=1e-9):
            raise ValidationError("covariance must be finite symmetric")
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ValidationError("covariance must be positive definite")
        if not (np.isfinite(self.h_hat) and self.h_hat > 0.0):
            raise ValidationError("h_hat must be finite and positive")
        object.__setattr__(self, "covariance", P.copy())


def initial_estimate(params: RobotParams, *,
                     x0: np.ndarray | None = None,
                     h0: float | None = None,
                     covariance0: np.ndarray | None = None) -> Estimate:
    """Fresh estimate: given or zero state, mid-stroke height."""
    lo, hi = params.leg_height_range
    if h0 is None:
        h0 = 0.5 * (lo + hi)
    if covariance0 is None:
        covariance0 = np.diag([0.05, 0.1, 0.1, 0.1])
    x = np.zeros(4) if x0 is None else np.asarray(x0, dtype=float)
    return Estimate(x_hat=LqrState(x), h_hat=float(h0),
                    covariance=np.asarray(covariance0, dtype=float),
                    odom=PlanarOdometry())


def predict(est: Estimate, u, dt: float, params: RobotParams,
            process_noise: np.ndarray | None = None) -> Estimate:
    """Propagate mean and covariance through the model at h_hat."""
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    u = np.asarray(u, dtype=float)
    W = DEFAULT_PROCESS_NOISE if process_noise is None else \
        np.asarray(process_noise, dtype=float)
    if abs(float(est.x_hat.x[0])) > MODEL_VALIDITY_PITCH:
        # fallen far outside the linearization; the upright model would
        # fight the sensors through the cross-covariance it builds, so
        # coast kinematically (dead-reckon tilt from the rate slot the
        # gyro keeps updated) and let the measurements hold authority
        F = np.eye(4)
        F[0, 1] = dt
        x = F @ est.x_hat.x
        P = F @ est.covariance @ F.T + W
        return replace(est, x_hat=LqrState(x), covariance=0.5 * (P + P.T))
    lo, hi = params.leg_height_range
    ssm = model.linearize(params, min(max(est.h_hat, lo), hi), dt)
    x = ssm.F @ est.x_hat.x + ssm.G @ u
    P = ssm.F @ est.covariance @ ssm.F.T + W
    P = 0.5 * (P + P.T)
    return replace(est, x_hat=LqrState(x), covariance=P)


def estimate_height(hip_angle_l: float, hip_angle_r: float,
                    params: RobotParams) -> float:
    """Mean of the per-leg heights, clamped to the operating band."""
    table = params.body_mass_fn
    # table rows are ascending in h, so hip angle descends along them
    alphas = table.hip_angles[::-1]
    heights = table.heights[::-1]
    lo, hi = float(alphas[0]), float(alphas[-1])
    hs = []
    for a in (hip_angle_l, hip_angle_r):
        # encoder noise routinely dips a hair past a hard stop; only a
        # gross excursion is worth a log line
        if a < lo - 0.02 or a > hi + 0.02:
            logger.warning("hip angle %.4f outside stroke [%.4f, %.4f], "
                           "clamping", a, lo, hi)
        hs.append(np.interp(a, alphas, heights))
    h_lo, h_hi = params.leg_height_range
    return float(min(max(0.5 * (hs[0] + hs[1]), h_lo), h_hi))


def integrate_odometry(odom: PlanarOdometry, v: float, omega: float,
                       dt: float) -> PlanarOdometry:
    """Midpoint-rule unicycle step."""
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    gamma_mid = odom.gamma + 0.5 * omega * dt
    return PlanarOdometry(
        x=odom.x + v * math.cos(gamma_mid) * dt,
        y=odom.y + v * math.sin(gamma_mid) * dt,
        gamma=odom.gamma + omega * dt,
        s=odom.s + abs(v) * dt,
    )


def decode_measurements(est: Estimate, frame: SensorFrame,
                        params: RobotParams, noise: NoiseConfig, *,
                        in_flight: bool = False):
    """Turn a sensor frame into (rows, z, R, tracker).

    rows indexes into the state: which of [theta, theta_dot, v, omega]
    this frame actually measures.  The speed rows appear only once the
    wheel-rate tracker has a previous sample to difference against.
    """
    g = params.gravity
    r = params.wheel_radius
    w = params.track_width

    theta_m = math.atan2(-frame.accel[0], frame.accel[2])
    norm_dev = abs(float(np.linalg.norm(frame.accel)) / g - 1.0)
    tilt_std = (noise.accel_std / g) * (1.0 + TILT_INFLATION_GAIN
                                        * norm_dev)
    rate_m = float(frame.gyro[1])

    if est.wheels is None:
        tracker = WheelRateTracker(
            time=frame.timestamp,
            angles=(frame.wheel_angle_l, frame.wheel_angle_r))
        have_rates = False
        wheel_rates, var_factor, dt = (0.0, 0.0), 0.0, 1.0
    else:
        tracker, wheel_rates, var_factor = est.wheels.advance(
            frame.timestamp, frame.wheel_angle_l, frame.wheel_angle_r)
        have_rates = True
        dt = frame.timestamp - est.wheels.time

    rows, z = [], []
    if not in_flight:
        rows.append(0)
        z.append(theta_m)
    rows.append(1)
    z.append(rate_m)
    if have_rates:
        v_m = r * 0.5 * (wheel_rates[0] + wheel_rates[1]) + r * rate_m
        omega_m = r * (wheel_rates[1] - wheel_rates[0]) / w
        rows += [2, 3]
        z += [v_m, omega_m]

    var = {0: tilt_std ** 2, 1: noise.gyro_std ** 2}
    if have_rates:
        rate_var = var_factor * (noise.encoder_std / dt) ** 2  # per wheel
        var[2] = r * r * (0.5 * rate_var + noise.gyro_std ** 2)
        var[3] = (r / w) ** 2 * 2.0 * rate_var
    R = np.diag([var[i] + _VAR_FLOOR for i in rows])
    if have_rates and 1 in rows:
        # speed correction reuses the pitch gyro sample
        i, j = rows.index(1), rows.index(2)
        R[i, j] = R[j, i] = r * noise.gyro_std ** 2
    return rows, np.array(z), R, tracker


def _ensure_spd(P: np.ndarray) -> np.ndarray:
    """Symmetrize, and jitter the diagonal if roundoff broke PD."""
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
        return P
    except np.linalg.LinAlgError:
        lift = max(0.0, -float(np.linalg.eigvalsh(P)[0]))
        jitter = 2.0 * lift + max(np.trace(P), 1.0) * 1e-12
        logger.warning("covariance lost positive definiteness, adding "
                       "%.1e jitter", jitter)
        return P + jitter * np.eye(P.shape[0])


def update(est: Estimate, frame: SensorFrame, params: RobotParams,
           noise: NoiseConfig, *, in_flight: bool = False) -> Estimate:
    """Standard Kalman measurement step on one sensor frame."""
    if est.wheels is not None and frame.timestamp <= est.wheels.time:
        raise ValidationError("sensor timestamps must increase")
    rows, z, R, tracker = decode_measurements(est, frame, params, noise,
                                              in_flight=in_flight)
    H = np.eye(4)[rows]
    P = est.covariance
    innovation = z - H @ est.x_hat.x
    if not np.all(np.isfinite(innovation)):
        raise ValidationError("non-finite innovation")
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x = est.x_hat.x + K @ innovation
    IKH = np.eye(4) - K @ H
    P = _ensure_spd(IKH @ P @ IKH.T + K @ R @ K.T)   # Joseph form
    h_hat = estimate_height(frame.hip_angle_l, frame.hip_angle_r, params)
    return replace(est, x_hat=LqrState(x), covariance=P, h_hat=h_hat,
                   wheels=tracker)
