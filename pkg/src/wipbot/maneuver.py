"""Jump and fall-recovery sequencers layered over the drive controller.

Both maneuvers are guarded finite state machines stepped at the
control rate.  They own the actuators while active: the simulator
routes wheel torques from the balance controller only when a step
reports `stabilizer_enabled`, and takes hip and wheel commands from
the machine otherwise.  Exactly one owner is in charge at any tick,
recorded in telemetry as the actuator token.

The jump runs five phases: crouch (stabilized), accelerate until the
rangefinders see the step, fire the legs along a timed ramp, tuck them
during flight behind a virtual spring-damper, and absorb the landing.
Recovery classifies the resting pose from contact flags, then either
rocks the body upright with a constant wheel torque until the energy
balance says momentum will carry it through, or, from flat on the
back, first swings the legs to tip into the sitting pose.  A roll
fall (one wheel, one leg) has no actuation path back up and is
reported as unrecoverable.

Angle conventions: body pitch is positive tipping forward, and a
positive wheel torque pushes the base forward, which pitches the body
backward.  Hip angles grow as the legs fold, so the crouch reference
is a larger angle than the extended one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import model
from .errors import ValidationError
from .estimate import Estimate, SensorFrame
from .params import RobotParams

WHEEL_TORQUE_LIMIT = 3.5    # N*m per wheel
HIP_TORQUE_LIMIT = 40.0     # N*m per hip

# body stillness thresholds: "settled" means both hold for HOLD_TIME
STABLE_PITCH = math.radians(2.0)
STABLE_PITCH_RATE = 0.2     # rad/s
HOLD_TIME = 0.3             # s

# accel norm bands marking free fall and firm ground contact
_AIRBORNE_ACCEL_FRAC = 0.35
_GROUNDED_ACCEL_FRAC = 0.6


class JumpPhase(Enum):
    RETRACT_LEGS = "retract_legs"
    TRIGGER_JUMP = "trigger_jump"
    EXTRACT_LEGS = "extract_legs"
    FLY = "fly"
    LAND = "land"
    DONE = "done"
    ABORTED = "aborted"


_JUMP_ORDER = [JumpPhase.RETRACT_LEGS, JumpPhase.TRIGGER_JUMP,
               JumpPhase.EXTRACT_LEGS, JumpPhase.FLY, JumpPhase.LAND,
               JumpPhase.DONE]


class RestingPosition(Enum):
    LAYING = "laying"
    SITTING = "sitting"
    PLANKING = "planking"
    SIDEWAYS = "sideways"
    UPRIGHT = "upright"


class RecoveryPhase(Enum):
    RETRACT_LEGS = "retract_legs"
    CONTROLLED_EXTRACTION = "controlled_extraction"
    APPLY_TORQUE = "apply_torque"
    BRAKE = "brake"
    DONE = "done"
    UNRECOVERABLE = "unrecoverable"


class ActuatorOwner(Enum):
    DRIVE = "drive"
    JUMP = "jump"
    RECOVERY = "recovery"
    DESCENT = "descent"


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    limit: float = HIP_TORQUE_LIMIT

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0 or self.limit <= 0:
            raise ValidationError("PID gains must be >= 0, limit > 0")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    last_error: float | None = None


def pid_step(state: PidState, error: float, dt: float,
             gains: PidGains):
    """Parallel-form PID with clamped integral.

    The derivative acts on the change of error, which equals the
    (negated) measurement derivative as long as the reference is held
    constant between calls; callers reset the state when the
    reference jumps, so no derivative kick occurs.
    """
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    deriv = 0.0 if state.last_error is None else \
        (error - state.last_error) / dt
    integral = state.integral + error * dt
    if gains.ki > 0.0:
        cap = gains.limit / gains.ki   # integral term alone can saturate
        integral = min(max(integral, -cap), cap)
    out = gains.kp * error + gains.ki * integral + gains.kd * deriv
    out = min(max(out, -gains.limit), gains.limit)
    return out, PidState(integral=integral, last_error=error)


def virtual_spring_damper(hip_angle: float, hip_rate: float,
                          ref_angle: float, k_v: float, d_v: float,
                          limit: float = HIP_TORQUE_LIMIT) -> float:
    """Torque of a simulated spring-damper pulling the hip to ref."""
    tau = -k_v * (hip_angle - ref_angle) - d_v * hip_rate
    return min(max(tau, -limit), limit)


@dataclass(frozen=True)
class JumpParams:
    """User-settable jump profile plus repo-tuned phase constants."""

    target_height: float = 0.25     # m of CoM rise above stance
    forward_velocity: float = 0.0   # m/s approach speed
    trigger_distance: float = math.inf   # m; inf fires immediately
    retract_angle: float = 1.55     # rad, crouch hip angle
    extract_angle: float = 0.45     # rad, fully extended hip angle
    land_torque_threshold: float = 12.0  # N*m on the flight spring
    leg_stroke: float = 0.306       # m of CoM travel crouch->extended
    stance_angle: float = 1.0834396  # rad, hip angle to settle at
    phase_timeout: float = 3.0      # s per phase before aborting

    def __post_init__(self):
        if not 0.0 < self.target_height <= 0.4:
            raise ValidationError("target_height must be in (0, 0.4] m")
        if not 0.0 <= self.forward_velocity <= 2.22:
            raise ValidationError("forward_velocity must be in "
                                  "[0, 2.22] m/s")
        if not self.trigger_distance > 0.0:
            raise ValidationError("trigger_distance must be positive")
        if self.extract_angle >= self.retract_angle:
            raise ValidationError("extraction must unfold the hips")
        if self.land_torque_threshold <= 0 or self.leg_stroke <= 0 \
                or self.phase_timeout <= 0:
            raise ValidationError("thresholds and timings must be "
                                  "positive")

    @property
    def extraction_time(self) -> float:
        """Ramp duration giving the CoM its takeoff speed.

        Firing the stroke in time T lends the body roughly stroke/T of
        vertical speed, so T scales with stroke / sqrt(2 g target).
        The body actually leaves the ground near the stroke's peak
        speed rather than its mean, so the ramp runs slower by a fixed
        tempo factor calibrated against simulator rollouts (apex held
        within a few percent over the useful height range).
        """
        return 1.42 * self.leg_stroke / math.sqrt(2.0 * 9.81
                                                  * self.target_height)

    def to_dict(self) -> dict:
        return {"target_height": self.target_height,
                "forward_velocity": self.forward_velocity,
                "trigger_distance": self.trigger_distance,
                "retract_angle": self.retract_angle,
                "extract_angle": self.extract_angle,
                "land_torque_threshold": self.land_torque_threshold,
                "leg_stroke": self.leg_stroke,
                "stance_angle": self.stance_angle,
                "phase_timeout": self.phase_timeout}

    @classmethod
    def from_dict(cls, d: dict) -> "JumpParams":
        return cls(**d)


# hip tracking while crouching/extending; repo-tuned
JUMP_HIP_GAINS = PidGains(kp=320.0, ki=0.0, kd=18.0,
                          limit=HIP_TORQUE_LIMIT)
# flight/landing spring-damper; repo-tuned
FLIGHT_SPRING_K = 60.0      # N*m/rad
FLIGHT_SPRING_D = 6.0       # N*m*s/rad
LANDING_SPRING_K = 90.0
LANDING_SPRING_D = 14.0
RETRACT_RAMP_TIME = 0.8     # s, crouch trajectory duration
EXTRACT_OVERSHOOT = 0.2     # rad below the exit threshold, see below


@dataclass(frozen=True)
class JumpState:
    """FSM carrier: phase label plus the timers and PID memory."""

    phase: JumpPhase = JumpPhase.RETRACT_LEGS
    t_in_phase: float = 0.0
    hold_time: float = 0.0
    start_hip: float = 1.0834396
    pid_l: PidState = field(default_factory=PidState)
    pid_r: PidState = field(default_factory=PidState)
    prev_hip_l: float | None = None   # rate memory for the dampers
    prev_hip_r: float | None = None
    drive_velocity: float = 0.0   # forward setpoint for the stabilizer

    def advanced(self, phase: JumpPhase, **kw) -> "JumpState":
        if phase is not self.phase:
            kw.setdefault("t_in_phase", 0.0)
            kw.setdefault("hold_time", 0.0)
            kw.setdefault("pid_l", PidState())
            kw.setdefault("pid_r", PidState())
        return replace(self, phase=phase, **kw)


def _is_airborne(frame: SensorFrame, g: float) -> bool:
    return float(np.linalg.norm(frame.accel)) < _AIRBORNE_ACCEL_FRAC * g


def _is_grounded(frame: SensorFrame, g: float) -> bool:
    return float(np.linalg.norm(frame.accel)) > _GROUNDED_ACCEL_FRAC * g


def _is_settled(estimate: Estimate) -> bool:
    return (abs(estimate.x_hat.x[0]) < STABLE_PITCH
            and abs(estimate.x_hat.x[1]) < STABLE_PITCH_RATE)


def jump_step(state: JumpState, estimate: Estimate, frame: SensorFrame,
              params: JumpParams, dt: float, gravity: float = 9.81):
    """Advance the jump one tick.

    Returns (state, hip_torques (2,), wheel_torques (2,),
    stabilizer_enabled).  Wheel torques matter only when the
    stabilizer is off; while it is on the balance controller drives
    the wheels, with `state.drive_velocity` as its forward setpoint.
    """
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    phase = state.phase
    t = state.t_in_phase + dt
    hips = np.zeros(2)
    wheels = np.zeros(2)
    stabilizer = True

    if phase is JumpPhase.DONE:
        return state, hips, wheels, True
    if phase is JumpPhase.ABORTED:
        return state, hips, wheels, _is_grounded(frame, gravity)

    if t > params.phase_timeout:
        stabilizer = _is_grounded(frame, gravity)
        return (state.advanced(JumpPhase.ABORTED, drive_velocity=0.0),
                hips, wheels, stabilizer)

    if phase is JumpPhase.RETRACT_LEGS:
        # timed crouch with the balance controller active
        frac = min(1.0, t / RETRACT_RAMP_TIME)
        ref = state.start_hip + frac * (params.retract_angle
                                        - state.start_hip)
        hips, pl, pr = _track_hips(state, frame, ref, dt)
        hold = state.hold_time + dt if (
            frac >= 1.0 and _is_settled(estimate)
            and abs(frame.hip_angle_l - params.retract_angle) < 0.05
            and abs(frame.hip_angle_r - params.retract_angle) < 0.05
        ) else 0.0
        if hold >= HOLD_TIME:
            state = state.advanced(
                JumpPhase.TRIGGER_JUMP,
                drive_velocity=params.forward_velocity)
        else:
            state = state.advanced(phase, t_in_phase=t, hold_time=hold,
                                   pid_l=pl, pid_r=pr)
        return state, hips, wheels, True

    if phase is JumpPhase.TRIGGER_JUMP:
        hips, pl, pr = _track_hips(state, frame, params.retract_angle,
                                   dt)
        if min(frame.tof_left, frame.tof_right) <= \
                params.trigger_distance:
            # keep the approach speed as the setpoint so the push-off
            # carries horizontal momentum into the flight
            state = state.advanced(
                JumpPhase.EXTRACT_LEGS,
                drive_velocity=params.forward_velocity)
        else:
            state = state.advanced(phase, t_in_phase=t, pid_l=pl,
                                   pid_r=pr)
        return state, hips, wheels, True

    if phase is JumpPhase.EXTRACT_LEGS:
        # the reference overshoots past the exit threshold so the legs
        # are still moving when they reach their hard extension stop;
        # arriving there at speed is what breaks ground contact
        frac = min(1.0, t / params.extraction_time)
        target = params.extract_angle - EXTRACT_OVERSHOOT
        ref = params.retract_angle + frac * (target
                                             - params.retract_angle)
        hips, pl, pr = _track_hips(state, frame, ref, dt)
        extracted = (frame.hip_angle_l < params.extract_angle + 0.08
                     and frame.hip_angle_r < params.extract_angle
                     + 0.08)
        stabilizer = not extracted   # contact is gone once extended
        if extracted or _is_airborne(frame, gravity):
            state = state.advanced(JumpPhase.FLY)
            stabilizer = False
        else:
            state = state.advanced(phase, t_in_phase=t, pid_l=pl,
                                   pid_r=pr)
        return state, hips, wheels, stabilizer

    if phase is JumpPhase.FLY:
        rate_l = _rate(frame.hip_angle_l, state.prev_hip_l, dt)
        rate_r = _rate(frame.hip_angle_r, state.prev_hip_r, dt)
        tau_l = virtual_spring_damper(frame.hip_angle_l, rate_l,
                                      params.retract_angle,
                                      FLIGHT_SPRING_K, FLIGHT_SPRING_D)
        tau_r = virtual_spring_damper(frame.hip_angle_r, rate_r,
                                      params.retract_angle,
                                      FLIGHT_SPRING_K, FLIGHT_SPRING_D)
        hips = np.array([tau_l, tau_r])
        landed = (max(abs(tau_l), abs(tau_r))
                  > params.land_torque_threshold
                  and t > 0.05)    # ignore the tuck transient
        state = state.advanced(
            JumpPhase.LAND if landed else phase,
            t_in_phase=0.0 if landed else t,
            prev_hip_l=frame.hip_angle_l, prev_hip_r=frame.hip_angle_r)
        return state, hips, wheels, False

    # LAND: stabilizer back on, bleed the impact through the damper
    rate_l = _rate(frame.hip_angle_l, state.prev_hip_l, dt)
    rate_r = _rate(frame.hip_angle_r, state.prev_hip_r, dt)
    tau_l = virtual_spring_damper(frame.hip_angle_l, rate_l,
                                  params.stance_angle,
                                  LANDING_SPRING_K, LANDING_SPRING_D)
    tau_r = virtual_spring_damper(frame.hip_angle_r, rate_r,
                                  params.stance_angle,
                                  LANDING_SPRING_K, LANDING_SPRING_D)
    hips = np.array([tau_l, tau_r])
    hold = state.hold_time + dt if _is_settled(estimate) else 0.0
    if hold >= HOLD_TIME:
        state = state.advanced(JumpPhase.DONE, drive_velocity=0.0)
    else:
        state = state.advanced(
            JumpPhase.LAND, t_in_phase=t, hold_time=hold,
            prev_hip_l=frame.hip_angle_l, prev_hip_r=frame.hip_angle_r)
    return state, hips, wheels, True


def _rate(angle: float, prev: float | None, dt: float) -> float:
    return 0.0 if prev is None else (angle - prev) / dt


def _track_hips(state: JumpState, frame: SensorFrame, ref: float,
                dt: float):
    """Symmetric PID tracking of one hip reference angle."""
    out_l, pl = pid_step(state.pid_l, ref - frame.hip_angle_l, dt,
                         JUMP_HIP_GAINS)
    out_r, pr = pid_step(state.pid_r, ref - frame.hip_angle_r, dt,
                         JUMP_HIP_GAINS)
    return np.array([out_l, out_r]), pl, pr


@dataclass(frozen=True)
class Contacts:
    """Ground-contact flags reported by the simulator."""

    wheel_l: bool = False
    wheel_r: bool = False
    leg_l: bool = False
    leg_r: bool = False
    body_front: bool = False
    body_back: bool = False


_ROLL_SIDEWAYS = 0.6    # rad of roll beyond which the fall is lateral


def classify_resting(pitch: float, roll: float, leg_config: float,
                     contacts: Contacts) -> RestingPosition:
    """Map pose and contact flags to the resting position.

    Total by construction: the cascade ends in Upright, which also
    covers the airborne no-contact case.
    """
    legs = contacts.leg_l or contacts.leg_r
    wheels = contacts.wheel_l or contacts.wheel_r
    one_wheel = contacts.wheel_l != contacts.wheel_r
    if abs(roll) > _ROLL_SIDEWAYS or (one_wheel and legs
                                      and abs(roll) > 0.25):
        return RestingPosition.SIDEWAYS
    if contacts.body_back:
        return RestingPosition.LAYING
    if contacts.body_front:
        return RestingPosition.PLANKING
    if legs and wheels:
        return RestingPosition.SITTING
    return RestingPosition.UPRIGHT


@dataclass(frozen=True)
class RecoveryConfig:
    """Stand-up tuning; all values repo-tuned in simulation."""

    params: RobotParams
    wheel_torque: float = 3.2       # N*m rocking effort
    retract_time: float = 0.6       # s to fold the legs
    extend_time: float = 0.55       # s of the tip-over leg swing out
    swing_back_time: float = 0.45   # s of the swing back
    extend_angle: float = 1.1       # rad, how far the swing unfolds
    retract_angle: float = 1.68     # rad, folded hip angle
    stance_angle: float = 1.0834396
    kick_torque: float = 36.0       # N*m fold slam of the swing back
    energy_margin: float = 1.05     # extra rotational energy factor
    apply_timeout: float = 2.5      # s before a rocking retry
    retry_limit: int = 3
    hold_time: float = HOLD_TIME

    def __post_init__(self):
        if abs(self.wheel_torque) > WHEEL_TORQUE_LIMIT:
            raise ValidationError("wheel_torque beyond actuator limit")
        if not 0.0 < self.kick_torque <= HIP_TORQUE_LIMIT:
            raise ValidationError("kick_torque beyond actuator limit")
        if self.retry_limit < 1 or self.energy_margin < 1.0:
            raise ValidationError("retry_limit >= 1 and margin >= 1 "
                                  "required")


@dataclass(frozen=True)
class RecoveryState:
    phase: RecoveryPhase = RecoveryPhase.RETRACT_LEGS
    position: RestingPosition = RestingPosition.SITTING
    t_in_phase: float = 0.0
    hold_time: float = 0.0
    retries: int = 0
    unfold_frac: float = 0.0
    pushing: bool = False
    caught: bool = False
    pid_l: PidState = field(default_factory=PidState)
    pid_r: PidState = field(default_factory=PidState)

    def advanced(self, phase: RecoveryPhase, **kw) -> "RecoveryState":
        if phase is not self.phase:
            kw.setdefault("t_in_phase", 0.0)
            kw.setdefault("hold_time", 0.0)
            kw.setdefault("unfold_frac", 0.0)
            kw.setdefault("pushing", False)
            kw.setdefault("caught", False)
            kw.setdefault("pid_l", PidState())
            kw.setdefault("pid_r", PidState())
        return replace(self, phase=phase, **kw)


def start_recovery(position: RestingPosition) -> RecoveryState:
    """Entry state for a stand-up attempt from the given pose."""
    if position is RestingPosition.UPRIGHT:
        raise ValidationError("nothing to recover from when upright")
    if position is RestingPosition.SIDEWAYS:
        return RecoveryState(phase=RecoveryPhase.UNRECOVERABLE,
                             position=position)
    return RecoveryState(phase=RecoveryPhase.RETRACT_LEGS,
                         position=position)


def _enough_energy_to_rise(estimate: Estimate,
                           config: RecoveryConfig) -> bool:
    """Rotational energy against the potential hill up to zero tilt."""
    p = config.params
    lo, hi = p.leg_height_range
    h = min(max(estimate.h_hat, lo), hi)
    c = model.body_coeffs(p, h)
    theta, theta_dot = estimate.x_hat.x[0], estimate.x_hat.x[1]
    if theta * theta_dot >= 0.0:    # must be rotating toward upright
        return False
    kinetic = 0.5 * c.a_th * theta_dot ** 2
    hill = c.k_g * (1.0 - math.cos(theta))
    return kinetic >= config.energy_margin * hill


# pitch rate under which the brake phase may unfold toward stance
BRAKE_EXTEND_RATE = 1.5     # rad/s
# tilt inside which the brake phase trusts the balance controller
BRAKE_CATCH_PITCH = 0.3     # rad
# crossing faster than this is not worth catching: arresting it just
# trades the rotation for cart speed the controller then has to chase
BRAKE_CATCH_RATE = 3.0      # rad/s
# capped damper bleeding energy once the swing passes the crest
BRAKE_DAMP_GAIN = 1.2       # N m per rad/s
BRAKE_DAMP_TORQUE = 2.5     # N m
# leg unfold time once the swing is caught; a fast extension is a jump
BRAKE_UNFOLD_TIME = 0.8     # s


def recovery_step(state: RecoveryState, position: RestingPosition,
                  estimate: Estimate, dt: float,
                  config: RecoveryConfig, *,
                  hip_angles: tuple[float, float] | None = None):
    """Advance the stand-up one tick.

    `position` is the live classification from the simulator; the
    plan was chosen from `state.position` at trigger time.  Returns
    (state, hip_torques, wheel_torques, stabilizer_enabled).
    """
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    phase = state.phase
    t = state.t_in_phase + dt
    hips = np.zeros(2)
    wheels = np.zeros(2)
    if hip_angles is None:
        hip_angles = (config.stance_angle, config.stance_angle)

    if phase in (RecoveryPhase.DONE, RecoveryPhase.UNRECOVERABLE):
        return state, hips, wheels, phase is RecoveryPhase.DONE

    if position is RestingPosition.SIDEWAYS:
        return (state.advanced(RecoveryPhase.UNRECOVERABLE), hips,
                wheels, False)

    if phase is RecoveryPhase.RETRACT_LEGS:
        frac = min(1.0, t / config.retract_time)
        start = config.stance_angle
        ref = start + frac * (config.retract_angle - start)
        hips, pl, pr = _track_recovery_hips(state, hip_angles, ref, dt)
        if frac >= 1.0:
            nxt = RecoveryPhase.CONTROLLED_EXTRACTION if \
                state.position is RestingPosition.LAYING else \
                RecoveryPhase.APPLY_TORQUE
            state = state.advanced(nxt)
        else:
            state = state.advanced(phase, t_in_phase=t, pid_l=pl,
                                   pid_r=pr)
        return state, hips, wheels, False

    if phase is RecoveryPhase.CONTROLLED_EXTRACTION:
        # swing the legs out, then slam them back into their fold
        # stop; the momentum exchanged at the stop pitches the torso
        # up off its back, usually through a short hop, and drops it
        # onto the seat
        t_total = config.extend_time + config.swing_back_time
        if t < config.extend_time:
            frac = t / config.extend_time
            ref = config.retract_angle + frac * (config.extend_angle
                                                 - config.retract_angle)
            hips, pl, pr = _track_recovery_hips(state, hip_angles, ref,
                                                dt)
        else:
            # full torque while the legs swing or the body is still on
            # its back (pinned legs then lever the torso through the
            # fold stop); once the body rocks up, pressing on just
            # pumps bounce.  Each retry slams a little harder, so a
            # swing the sensor noise left short escalates to one that
            # clears the hill.
            hi = config.params.leg_design.hip_range[1]
            pinned = min(hip_angles) >= hi - 0.02
            done_pushing = pinned and position is not RestingPosition.LAYING
            kick = min(config.kick_torque + 2.0 * state.retries,
                       HIP_TORQUE_LIMIT)
            hips = np.full(2, 4.0 if done_pushing else kick)
            pl, pr = PidState(), PidState()
        th_hat = float(estimate.x_hat.x[0])
        rate_hat = float(estimate.x_hat.x[1])
        if t >= config.extend_time and th_hat > -1.45:
            # the slam pried the back off the floor: drive the wheels
            # like the seated push-off right away; past the first few
            # degrees the wheel torque out-levers gravity, so any rock
            # that clears the stop walks up the rest of the hill
            if _enough_energy_to_rise(estimate, config):
                return (state.advanced(RecoveryPhase.BRAKE), hips,
                        np.zeros(2), True)
            wheels = np.full(2, -config.wheel_torque)
        else:
            # the cart recoils from the swing; bleed the roll off so
            # retries do not drift across the floor
            wheels = np.full(2, float(np.clip(
                -0.8 * float(estimate.x_hat.x[2]), -1.5, 1.5)))
        if position is RestingPosition.SITTING and t >= config.extend_time:
            state = state.advanced(RecoveryPhase.APPLY_TORQUE,
                                   position=position)
        elif t >= t_total and position is RestingPosition.PLANKING:
            # sailed over the top: push back from the front side
            state = _retry_or_fail(state, config,
                                   RecoveryPhase.APPLY_TORQUE, position)
        elif (t >= t_total and abs(th_hat) < BRAKE_CATCH_PITCH
              and abs(rate_hat) < 3.0):
            # the hop happened to land near balance: catch it
            return (state.advanced(RecoveryPhase.BRAKE), hips,
                    np.zeros(2), True)
        elif (t >= t_total + 0.5 and th_hat < -1.2
              and abs(rate_hat) < 0.5):
            # swing spent and the body never rose: no point waiting
            state = _retry_or_fail(state, config,
                                   RecoveryPhase.CONTROLLED_EXTRACTION)
        elif t >= t_total + config.apply_timeout:
            state = _retry_or_fail(state, config,
                                   RecoveryPhase.CONTROLLED_EXTRACTION)
        else:
            state = state.advanced(phase, t_in_phase=t, pid_l=pl,
                                   pid_r=pr)
        return state, hips, wheels, False

    if phase is RecoveryPhase.APPLY_TORQUE:
        hips, pl, pr = _track_recovery_hips(
            state, hip_angles, config.retract_angle, dt)
        v_hat = float(estimate.x_hat.x[2])
        pushing = state.pushing or abs(v_hat) <= 0.3
        if not pushing:
            # still rolling from a hop or an earlier push: the swing
            # budget assumes a resting cart, so brake it first, gently
            # enough not to pry the latched stop open; once the push
            # starts it owns the cart speed
            wheels = np.full(2, float(np.clip(-1.2 * v_hat, -2.0, 2.0)))
        else:
            # sitting rocks by driving backward, planking forward
            sign = -1.0 if state.position is not \
                RestingPosition.PLANKING else 1.0
            wheels = np.full(2, sign * config.wheel_torque)
        if _enough_energy_to_rise(estimate, config):
            return (state.advanced(RecoveryPhase.BRAKE), hips,
                    np.zeros(2), True)
        if t > config.apply_timeout:
            # fell onto the back meanwhile: rocking alone cannot leave
            # that pose, restart with the leg swing
            retry = RecoveryPhase.CONTROLLED_EXTRACTION if \
                position is RestingPosition.LAYING else \
                RecoveryPhase.APPLY_TORQUE
            state = _retry_or_fail(state, config, retry, position)
        else:
            state = state.advanced(phase, t_in_phase=t, pushing=pushing,
                                   pid_l=pl, pid_r=pr)
        return state, hips, wheels, False

    # BRAKE: let the swing coast up on the energy the push budgeted,
    # bleed whatever carries it past the crest with a capped pitch-rate
    # damper, and hand the wheels to the balance controller once the
    # crest arrives slow enough to hold.  The handoff latches: arresting
    # a swing costs cart speed, and the controller leans out past the
    # basin while it pays that back, so stripping it at the basin edge
    # would drop the body onto a stop mid-fight.  A crossing too hot to
    # catch coasts through instead and the far stop takes it.
    th_hat = float(estimate.x_hat.x[0])
    rate_hat = float(estimate.x_hat.x[1])
    fold = abs(rate_hat) >= BRAKE_EXTEND_RATE or abs(th_hat) >= 0.2
    if fold:
        # folding presses the wheels down, so it may run fast
        frac = max(0.0, state.unfold_frac - 2.0 * dt / BRAKE_UNFOLD_TIME)
    else:
        frac = min(1.0, state.unfold_frac + dt / BRAKE_UNFOLD_TIME)
    ref = config.retract_angle + frac * (config.stance_angle
                                         - config.retract_angle)
    hips, pl, pr = _track_recovery_hips(state, hip_angles, ref, dt)
    if position is not RestingPosition.UPRIGHT and \
            not _enough_energy_to_rise(estimate, config):
        # fell back onto a stop, out of swing energy: push again from
        # wherever it landed (a robot on its back needs the full
        # leg-swing sequence; legs brushing the ground mid-upswing do
        # not count as a fall)
        retry = RecoveryPhase.CONTROLLED_EXTRACTION if \
            position is RestingPosition.LAYING else \
            RecoveryPhase.APPLY_TORQUE
        return (_retry_or_fail(state, config, retry, position), hips,
                np.zeros(2), False)
    catch = state.caught or (abs(th_hat) < BRAKE_CATCH_PITCH
                             and abs(rate_hat) < BRAKE_CATCH_RATE)
    if not catch and th_hat * rate_hat > 0.0:
        # rotating away from upright: wheel torque reacts on the body
        # against the swing
        wheels = np.full(2, np.clip(BRAKE_DAMP_GAIN * rate_hat,
                                    -BRAKE_DAMP_TORQUE,
                                    BRAKE_DAMP_TORQUE))
    settled = _is_settled(estimate) and frac >= 1.0
    hold = state.hold_time + dt if settled else 0.0
    if hold >= config.hold_time:
        state = state.advanced(RecoveryPhase.DONE)
    else:
        state = state.advanced(RecoveryPhase.BRAKE, t_in_phase=t,
                               hold_time=hold, unfold_frac=frac,
                               caught=catch, pid_l=pl, pid_r=pr)
    return state, hips, wheels, catch


def _retry_or_fail(state: RecoveryState, config: RecoveryConfig,
                   retry_phase: RecoveryPhase,
                   position: RestingPosition | None = None
                   ) -> RecoveryState:
    """Tip-over path: try the push again, give up after the budget.

    When the live pose is a resting one it replaces the plan pose, so
    a robot that tipped over the top and landed on the opposite stop
    pushes back in the right direction.
    """
    if state.retries + 1 >= config.retry_limit:
        return state.advanced(RecoveryPhase.UNRECOVERABLE)
    pos = state.position
    if position in (RestingPosition.SITTING, RestingPosition.LAYING,
                    RestingPosition.PLANKING):
        pos = position
    return replace(state, phase=retry_phase, position=pos,
                   t_in_phase=0.0, hold_time=0.0, unfold_frac=0.0,
                   pushing=False, caught=False,
                   retries=state.retries + 1,
                   pid_l=PidState(), pid_r=PidState())


RECOVERY_HIP_GAINS = PidGains(kp=260.0, ki=0.0, kd=14.0,
                              limit=HIP_TORQUE_LIMIT)


def _track_recovery_hips(state: RecoveryState, hip_angles, ref, dt):
    out_l, pl = pid_step(state.pid_l, ref - hip_angles[0], dt,
                         RECOVERY_HIP_GAINS)
    out_r, pr = pid_step(state.pid_r, ref - hip_angles[1], dt,
                         RECOVERY_HIP_GAINS)
    return np.array([out_l, out_r]), pl, pr


DESCENT_WHEEL_TORQUE = 0.8  # N*m nudge picking the fall direction


def controlled_descent(target: RestingPosition, estimate: Estimate,
                       dt: float):
    """Commands easing the robot down into a resting pose.

    Returns (hip_torques, wheel_torques, stabilizer_enabled=False).
    The caller watches classify_resting and stops once the target pose
    is reached (or flags a fault if a different one is).
    """
    if target not in (RestingPosition.LAYING, RestingPosition.SITTING,
                      RestingPosition.PLANKING):
        raise ValidationError("descent targets a resting pose")
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    # forward push pitches the body backward: sit and lay fall aft,
    # planking falls forward
    sign = 1.0 if target is not RestingPosition.PLANKING else -1.0
    wheels = np.full(2, sign * DESCENT_WHEEL_TORQUE)
    # sitting lands on folded legs, so fold on the way down; laying
    # must keep the legs out or the seat would latch first; planking
    # lays the body out over the wheels
    if target is RestingPosition.SITTING:
        hip_tau = 3.0
    elif target is RestingPosition.LAYING:
        hip_tau = -1.0
    else:
        hip_tau = -2.0
    hips = np.full(2, hip_tau)
    return hips, wheels, False
