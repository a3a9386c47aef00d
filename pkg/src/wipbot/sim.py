"""Hybrid contact/flight physics, sensors, and scenario execution.

World model
-----------
On the ground the robot is the three-coordinate system of the dynamics
module (pitch, wheel travel, yaw) plus one hinge per leg.  Leg motion
feeds back into the body only through the substitute-pendulum height,
which is treated as quasistatic there; the vertical momentum built up
by a fast extension is handled separately at the takeoff event, where
the body's upward momentum is redistributed over the whole machine and
the state switches to a ballistic flight mode (center of mass in free
fall, pitch rate constant, legs swinging on their hinges).  Touchdown
reverses the exchange: the vertical speed goes into leg compression
for the hip spring-damper to bleed off, and the wheels re-engage
rolling without slip.  Both transitions are located by bisection.

Fallen poses are one-sided pitch stops (legs folded behind, body back,
body front).  Stops absorb incoming pitch rate; a wheel torque or a
leg-swing reaction that pushes the body off a stop releases it, which
is exactly how the stand-up maneuvers work: the controlled-extraction
swing of a robot on its back transfers leg momentum into a pitch kick
at the fold stop, and the rocking push from sitting or planking drives
the coupled cart-pendulum dynamics off the stop and up.

Deliberate simplifications, chosen to keep every mechanism the
controllers rely on while staying planar: no roll dynamics (a
sideways pose is a frozen flag), 1-D piecewise-constant terrain,
no wheel slip, leg pairs coupled only through the mean height.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache

import numpy as np

from . import control, estimate, maneuver, model
from .control import DEFAULT_WEIGHTS, LqrWeights, VelocitySetpoint
from .errors import IntegrationFault, ValidationError
from .estimate import Estimate, NoiseConfig, SensorFrame
from .maneuver import (Contacts, JumpParams, JumpPhase, JumpState,
                       RecoveryConfig, RecoveryPhase, RestingPosition)
from .model import GeneralizedState
from .params import (RobotParams, default_params,
                     hip_angle_for_total_height)

# event location tolerance for mode transitions
EVENT_TIME_TOL = 1e-6

# fallen-pose pitch stops (rad); crude body-geometry bounds
SIT_STOP_PITCH = -0.78      # legs folded touch behind the wheels
LAY_STOP_PITCH = -1.50      # back of the torso on the ground
PLANK_STOP_PITCH = 1.05     # front of the torso on the ground
SIT_LEGS_FOLDED = 1.25      # rad of hip flexion for the sit stop

# leg hinge model
LEG_LINK_INERTIA = 0.02     # kg m^2, bars about the hip
TAKEOFF_MIN_SPEED = 0.05    # m/s upward to actually leave the ground
TOUCHDOWN_ARM_CLEARANCE = 0.002   # m of air before touchdown arms

# ToF optics
TOF_MAX_RANGE = 4.0         # m


class SimMode(Enum):
    CONTACT = "contact"
    FLIGHT = "flight"


@dataclass(frozen=True)
class Terrain:
    """Piecewise-constant 1-D elevation: (x, elevation) rise edges."""

    steps: tuple = ()

    def __post_init__(self):
        steps = tuple((float(x), float(z)) for x, z in self.steps)
        xs = [x for x, _ in steps]
        if xs != sorted(xs):
            raise ValidationError("terrain edges must have ascending x")
        object.__setattr__(self, "steps", steps)

    def elevation(self, x: float) -> float:
        z = 0.0
        for sx, sz in self.steps:
            if x >= sx:
                z = sz
        return z

    def next_rise(self, x: float):
        """(distance, new elevation) of the next upward edge, or None."""
        here = self.elevation(x)
        for sx, sz in self.steps:
            if sx > x and sz > here:
                return sx - x, sz
        return None

    def to_dict(self) -> dict:
        return {"steps": [list(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "Terrain":
        return cls(steps=tuple(tuple(s) for s in d.get("steps", ())))


@dataclass(frozen=True)
class DisturbanceEvent:
    """External disturbance: impulse, constant force, or added mass.

    `magnitude` is N*s, N, or kg by kind.  `point` is the application
    height above the axle along the body axis (impulse/force only).
    """

    kind: str                  # impulse | constant_force | added_mass
    magnitude: float
    start: float
    point: float = 0.0
    duration: float = 0.0

    def __post_init__(self):
        if self.kind not in ("impulse", "constant_force", "added_mass"):
            raise ValidationError(f"unknown disturbance kind "
                                  f"{self.kind!r}")
        vals = (self.magnitude, self.start, self.point, self.duration)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError("disturbance fields must be finite")
        if self.start < 0.0 or self.duration < 0.0:
            raise ValidationError("start and duration must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "magnitude": self.magnitude,
                "start": self.start, "point": self.point,
                "duration": self.duration}

    @classmethod
    def from_dict(cls, d: dict) -> "DisturbanceEvent":
        return cls(**d)


class _LegKinematics:
    """Hip angle <-> leg height interpolants plus the stroke Jacobian."""

    def __init__(self, params: RobotParams):
        table = params.body_mass_fn
        self.alphas = table.hip_angles[::-1].copy()     # ascending
        self.heights = table.heights[::-1].copy()       # descending
        self.jac = np.gradient(self.heights, self.alphas)
        self.alpha_lo = float(self.alphas[0])    # full extension
        self.alpha_hi = float(self.alphas[-1])   # full flexion

    def h_of(self, alpha: float) -> float:
        return float(np.interp(alpha, self.alphas, self.heights))

    def jac_of(self, alpha: float) -> float:
        """dh/dalpha, negative: folding lowers the body."""
        return float(np.interp(alpha, self.alphas, self.jac))


@lru_cache(maxsize=8)
def _leg_kinematics(params: RobotParams) -> _LegKinematics:
    return _LegKinematics(params)


@dataclass(frozen=True)
class ActuatorCommands:
    """Wheel and hip torques for one physics interval."""

    wheel: np.ndarray           # (2,) N m, left/right
    hip: np.ndarray             # (2,) N m, left/right

    def __post_init__(self):
        wheel = np.asarray(self.wheel, dtype=float)
        hip = np.asarray(self.hip, dtype=float)
        if wheel.shape != (2,) or hip.shape != (2,):
            raise ValidationError("commands must be length-2 vectors")
        if not (np.all(np.isfinite(wheel)) and np.all(np.isfinite(hip))):
            raise ValidationError("commands must be finite")
        object.__setattr__(self, "wheel", wheel)
        object.__setattr__(self, "hip", hip)

    @classmethod
    def zero(cls) -> "ActuatorCommands":
        return cls(wheel=np.zeros(2), hip=np.zeros(2))


@dataclass
class SimWorld:
    """Full simulation state; advanced in place by physics_step."""

    params: RobotParams
    terrain: Terrain = field(default_factory=Terrain)
    mode: SimMode = SimMode.CONTACT
    t: float = 0.0
    # body coordinates (contact: pitch/travel/yaw; flight: pitch only)
    theta: float = 0.0
    theta_dot: float = 0.0
    s: float = 0.0
    s_dot: float = 0.0
    gamma: float = 0.0
    gamma_dot: float = 0.0
    # ground-plane wheel position (terrain coordinate) and elevation
    x: float = 0.0
    y: float = 0.0
    ground_z: float = 0.0
    # legs
    legs: np.ndarray = None          # (2,) hip angles
    leg_rates: np.ndarray = None
    legs_locked: bool = False
    leg_friction: float = 0.3        # N m s/rad at the hinge
    # flight-only center-of-mass state
    com_x: float = 0.0
    com_z: float = 0.0
    com_vx: float = 0.0
    com_vz: float = 0.0
    # pitch stops currently holding the body (fallen poses)
    stop_sit: bool = False
    stop_lay: bool = False
    stop_plank: bool = False
    roll: float = 0.0                # frozen; no roll dynamics
    # disturbances
    disturbances: tuple = ()
    added_mass: float = 0.0
    _dist_cursor: int = 0
    # diagnostics kept for the sensor model and the run summary
    com_acc: np.ndarray = None       # (2,) world frame
    fault: str | None = None
    touchdown_armed: bool = False
    takeoff_z: float = 0.0
    apex_gain: float = 0.0           # best flight rise so far
    n_takeoffs: int = 0
    n_touchdowns: int = 0
    events: list = field(default_factory=list)   # (t, name, detail)

    def __post_init__(self):
        kin = _leg_kinematics(self.params)
        stance = 0.5 * (kin.alpha_lo + kin.alpha_hi)
        if self.legs is None:
            self.legs = np.full(2, stance)
        self.legs = np.asarray(self.legs, dtype=float).copy()
        if self.leg_rates is None:
            self.leg_rates = np.zeros(2)
        self.leg_rates = np.asarray(self.leg_rates, dtype=float).copy()
        if self.com_acc is None:
            self.com_acc = np.zeros(2)
        self.com_acc = np.asarray(self.com_acc, dtype=float).copy()
        self.disturbances = tuple(sorted(self.disturbances,
                                         key=lambda d: d.start))

    # -- derived geometry --------------------------------------------------

    @property
    def mean_hip(self) -> float:
        return float(self.legs.mean())

    def leg_height(self) -> float:
        """True substitute-pendulum height from the hip angles."""
        kin = _leg_kinematics(self.params)
        return 0.5 * (kin.h_of(self.legs[0]) + kin.h_of(self.legs[1]))

    def model_height(self) -> float:
        """Leg height clamped into the model's operating band."""
        lo, hi = self.params.leg_height_range
        return min(max(self.leg_height(), lo), hi)

    def com_position(self) -> tuple[float, float]:
        if self.mode is SimMode.FLIGHT:
            return self.com_x, self.com_z
        arm = self.leg_height() - self.params.wheel_radius
        return (self.x + arm * math.sin(self.theta),
                self.ground_z + self.params.wheel_radius
                + arm * math.cos(self.theta))

    def com_velocity(self) -> tuple[float, float]:
        if self.mode is SimMode.FLIGHT:
            return self.com_vx, self.com_vz
        kin = _leg_kinematics(self.params)
        arm = self.leg_height() - self.params.wheel_radius
        jm = 0.5 * (kin.jac_of(self.legs[0]) * self.leg_rates[0]
                    + kin.jac_of(self.legs[1]) * self.leg_rates[1])
        vx = (self.s_dot * math.cos(self.gamma)
              + jm * math.sin(self.theta)
              + arm * math.cos(self.theta) * self.theta_dot)
        vz = (jm * math.cos(self.theta)
              - arm * math.sin(self.theta) * self.theta_dot)
        return vx, vz

    def wheel_center_xz(self) -> tuple[float, float]:
        if self.mode is not SimMode.FLIGHT:
            return self.x, self.ground_z + self.params.wheel_radius
        arm = self.leg_height() - self.params.wheel_radius
        return (self.com_x - arm * math.sin(self.theta),
                self.com_z - arm * math.cos(self.theta))

    def wheel_spin_rates(self) -> tuple[float, float]:
        """Absolute wheel rotation rates (rolling ties them to travel)."""
        r = self.params.wheel_radius
        half_w = 0.5 * self.params.track_width
        if self.mode is SimMode.FLIGHT:
            return self.s_dot / r, self.s_dot / r   # freewheel, no torque
        return ((self.s_dot - half_w * self.gamma_dot) / r,
                (self.s_dot + half_w * self.gamma_dot) / r)

    def contacts(self) -> Contacts:
        grounded = self.mode is SimMode.CONTACT
        return Contacts(wheel_l=grounded, wheel_r=grounded,
                        leg_l=self.stop_sit, leg_r=self.stop_sit,
                        body_front=self.stop_plank,
                        body_back=self.stop_lay)

    def resting_position(self) -> RestingPosition:
        return maneuver.classify_resting(self.theta, self.roll,
                                         self.mean_hip, self.contacts())

    def copy(self) -> "SimWorld":
        w = replace(self)
        w.legs = self.legs.copy()
        w.leg_rates = self.leg_rates.copy()
        w.com_acc = self.com_acc.copy()
        w.events = []       # probe copies never report events
        return w


# -- dynamics ---------------------------------------------------------------


def _added_mass_terms(c, dm: float, theta: float, theta_dot: float,
                      s_dot: float, gamma_dot: float):
    """Mass-matrix and forcing corrections for a point mass at the CoM."""
    l = c.l
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    m_add = np.array([
        [dm * l * l, dm * l * cos_t, 0.0],
        [dm * l * cos_t, dm, 0.0],
        [0.0, 0.0, dm * l * l * sin_t ** 2]])
    f_add = np.array([
        dm * c.g * l * sin_t
        + 0.5 * dm * l * l * math.sin(2 * theta) * gamma_dot ** 2,
        dm * l * sin_t * (theta_dot ** 2 + gamma_dot ** 2),
        -dm * l * l * math.sin(2 * theta) * theta_dot * gamma_dot
        - dm * l * sin_t * s_dot * gamma_dot])
    return m_add, f_add


def _active_forces(world: SimWorld):
    """Constant-force disturbances live at the current time."""
    out = []
    for d in world.disturbances:
        if d.kind == "constant_force" and \
                d.start <= world.t < d.start + d.duration:
            out.append(d)
    return out


def _leg_inertia(world: SimWorld, alpha: float, grounded: bool) -> float:
    kin = _leg_kinematics(world.params)
    c_mass = world.params.body_mass_fn.mass
    if grounded:
        # leg motion lifts the body: half the body reflected through
        # the stroke Jacobian
        return LEG_LINK_INERTIA + 0.5 * c_mass * kin.jac_of(alpha) ** 2
    # body held (flight or on its back): leg swings its wheel instead
    r_w = kin.h_of(alpha)
    return LEG_LINK_INERTIA + world.params.wheel_mass * r_w ** 2


def _leg_accels(world: SimWorld, legs, leg_rates, hip_torques,
                theta: float) -> np.ndarray:
    if world.legs_locked:
        return np.zeros(2)
    p = world.params
    kin = _leg_kinematics(p)
    grounded = world.mode is SimMode.CONTACT and not world.stop_lay
    out = np.empty(2)
    for i in range(2):
        alpha = float(legs[i])
        tau = float(hip_torques[i]) + p.spring_torque(alpha)
        if grounded:
            # gravity load of the supported body, half per leg
            tau -= (0.5 * p.body_mass_fn.mass * p.gravity
                    * math.cos(theta) * kin.jac_of(alpha))
        tau -= world.leg_friction * float(leg_rates[i])
        out[i] = tau / _leg_inertia(world, alpha, grounded)
    return out


def _pitch_locked(world: SimWorld) -> bool:
    return world.stop_sit or world.stop_lay or world.stop_plank


def _contact_derivative(world: SimWorld, y: np.ndarray,
                        commands: ActuatorCommands) -> np.ndarray:
    """State derivative on y = [th, s, ga, thd, sd, gad, a_l, a_r,
    ad_l, ad_r, x, y_pos]."""
    theta, s, gamma, theta_dot, s_dot, gamma_dot = y[:6]
    legs, leg_rates = y[6:8], y[8:10]
    p = world.params
    lo, hi = p.leg_height_range
    kin = _leg_kinematics(p)
    h_l = kin.h_of(float(legs[0]))
    h_r = kin.h_of(float(legs[1]))
    h = min(max(0.5 * (h_l + h_r), lo), hi)

    if _pitch_locked(world):
        theta_dot = 0.0     # the stop supplies the constraint torque
    state = GeneralizedState(q=np.array([theta, s, gamma]),
                             q_dot=np.array([theta_dot, s_dot,
                                             gamma_dot]))
    m_mat = model.mass_matrix(state, p, h)
    f = model.forcing(state, commands.wheel, p, h)
    c = model.body_coeffs(p, h)
    if world.added_mass != 0.0:
        m_add, f_add = _added_mass_terms(c, world.added_mass, theta,
                                         theta_dot, s_dot, gamma_dot)
        m_mat = m_mat + m_add
        f = f + f_add
    for d in _active_forces(world):
        f[0] += d.magnitude * d.point * math.cos(theta)
        f[1] += d.magnitude
    # leg-swing reaction on the body while it rests on its back: the
    # hinge torque reacts on the torso and can pry it off the stop
    if world.stop_lay:
        i_free = sum(_leg_inertia(world, float(legs[i]), False)
                     for i in range(2))
        leg_acc = _leg_accels(world, legs, leg_rates, commands.hip,
                              theta)
        f[0] -= 0.5 * i_free * float(leg_acc.sum())
    if _pitch_locked(world):
        # constrained row drops out; solving the full system and then
        # zeroing the pitch acceleration would leak the gravity
        # coupling into travel
        q_ddot = np.zeros(3)
        q_ddot[1:] = np.linalg.solve(m_mat[1:, 1:], f[1:])
    else:
        q_ddot = np.linalg.solve(m_mat, f)
    leg_acc = _leg_accels(world, legs, leg_rates, commands.hip, theta)
    return np.concatenate((
        [theta_dot, s_dot, gamma_dot], q_ddot,
        leg_rates if not world.legs_locked else np.zeros(2), leg_acc,
        [s_dot * math.cos(gamma), s_dot * math.sin(gamma)]))


def _flight_derivative(world: SimWorld, y: np.ndarray,
                       commands: ActuatorCommands) -> np.ndarray:
    """y = [com_x, com_z, theta, vx, vz, theta_dot, a_l, a_r, ad_l,
    ad_r]."""
    legs, leg_rates = y[6:8], y[8:10]
    leg_acc = _leg_accels(world, legs, leg_rates, commands.hip, y[2])
    return np.concatenate((
        [y[3], y[4], y[5], 0.0, -world.params.gravity, 0.0],
        leg_rates if not world.legs_locked else np.zeros(2), leg_acc))


def _get_y(world: SimWorld) -> np.ndarray:
    if world.mode is SimMode.CONTACT:
        return np.array([world.theta, world.s, world.gamma,
                         world.theta_dot, world.s_dot, world.gamma_dot,
                         world.legs[0], world.legs[1],
                         world.leg_rates[0], world.leg_rates[1],
                         world.x, world.y])
    return np.array([world.com_x, world.com_z, world.theta,
                     world.com_vx, world.com_vz, world.theta_dot,
                     world.legs[0], world.legs[1],
                     world.leg_rates[0], world.leg_rates[1]])


def _set_y(world: SimWorld, y: np.ndarray) -> None:
    if world.mode is SimMode.CONTACT:
        (world.theta, world.s, world.gamma, world.theta_dot,
         world.s_dot, world.gamma_dot) = (float(v) for v in y[:6])
        world.legs = y[6:8].copy()
        world.leg_rates = y[8:10].copy()
        world.x, world.y = float(y[10]), float(y[11])
        if _pitch_locked(world):
            world.theta_dot = 0.0
    else:
        (world.com_x, world.com_z, world.theta, world.com_vx,
         world.com_vz, world.theta_dot) = (float(v) for v in y[:6])
        world.legs = y[6:8].copy()
        world.leg_rates = y[8:10].copy()


def _rk4(world: SimWorld, commands: ActuatorCommands,
         dt: float) -> None:
    deriv = _contact_derivative if world.mode is SimMode.CONTACT \
        else _flight_derivative
    y = _get_y(world)
    k1 = deriv(world, y, commands)
    k2 = deriv(world, y + 0.5 * dt * k1, commands)
    k3 = deriv(world, y + 0.5 * dt * k2, commands)
    k4 = deriv(world, y + dt * k3, commands)
    _set_y(world, y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
    world.t += dt


def _apply_impulses(world: SimWorld) -> None:
    """Fire queued impulse/added-mass disturbances whose time arrived."""
    while world._dist_cursor < len(world.disturbances):
        d = world.disturbances[world._dist_cursor]
        if d.start > world.t + 1e-12:
            break
        world._dist_cursor += 1
        if d.kind == "constant_force":
            world.events.append((world.t, "disturbance",
                                 f"constant_force {d.magnitude:g} N "
                                 f"for {d.duration:g} s"))
            continue
        world.events.append((world.t, "disturbance",
                             f"{d.kind} {d.magnitude:g}"))
        if d.kind == "added_mass":
            world.added_mass += d.magnitude
        elif d.kind == "impulse" and world.mode is SimMode.CONTACT:
            h = world.model_height()
            state = GeneralizedState(
                q=np.array([world.theta, world.s, world.gamma]),
                q_dot=np.array([world.theta_dot, world.s_dot,
                                world.gamma_dot]))
            m_mat = model.mass_matrix(state, world.params, h)
            gen = np.array([d.magnitude * d.point
                            * math.cos(world.theta), d.magnitude, 0.0])
            dq = np.linalg.solve(m_mat, gen)
            world.theta_dot += float(dq[0])
            world.s_dot += float(dq[1])
            world.gamma_dot += float(dq[2])
        elif d.kind == "impulse":
            # airborne: push the center of mass and the pitch
            m_tot = world.params.total_mass
            world.com_vx += d.magnitude / m_tot
            h = world.model_height()
            c = model.body_coeffs(world.params, h)
            world.theta_dot += (d.magnitude * d.point
                                * math.cos(world.theta) / c.a_th)


# -- events -----------------------------------------------------------------


def _clamp_leg_stops(world: SimWorld) -> float:
    """Hard stops at the stroke ends; returns fold-stop momentum."""
    kin = _leg_kinematics(world.params)
    fold_momentum = 0.0
    for i in range(2):
        if world.legs[i] <= kin.alpha_lo:
            world.legs[i] = kin.alpha_lo
            if world.leg_rates[i] < 0.0:
                world.leg_rates[i] = 0.0
        elif world.legs[i] >= kin.alpha_hi:
            world.legs[i] = kin.alpha_hi
            if world.leg_rates[i] > 0.0:
                i_leg = _leg_inertia(world, float(world.legs[i]),
                                     not (world.stop_lay or
                                          world.mode is SimMode.FLIGHT))
                fold_momentum += i_leg * world.leg_rates[i]
                world.leg_rates[i] = 0.0
    return fold_momentum


def _takeoff_speed(world: SimWorld) -> float:
    """Body vertical speed from leg extension, before redistribution."""
    kin = _leg_kinematics(world.params)
    jm = 0.5 * (kin.jac_of(float(world.legs[0])) * world.leg_rates[0]
                + kin.jac_of(float(world.legs[1])) * world.leg_rates[1])
    return jm * math.cos(world.theta)


def _do_takeoff(world: SimWorld, vz_com: float | None = None,
                keep_leg_rates: bool = False) -> None:
    """Switch to flight.

    With vz_com given the transition is smooth (ground reaction went
    through zero): the tracked velocity carries over and the legs keep
    their rates. Without it the legs slammed the extension stop, so
    their momentum is redistributed over the whole machine and the
    rates are zeroed by the lock.
    """
    if vz_com is None:
        m_b = world.params.body_mass_fn.mass
        vz_com = m_b * _takeoff_speed(world) / world.params.total_mass
    vx, _ = world.com_velocity()
    cx, cz = world.com_position()
    world.mode = SimMode.FLIGHT
    world.com_x, world.com_z = cx, cz
    world.com_vx, world.com_vz = vx, vz_com
    if not keep_leg_rates:
        world.leg_rates[:] = 0.0
    world.stop_sit = world.stop_lay = world.stop_plank = False
    world.touchdown_armed = False
    world.takeoff_z = cz
    world.n_takeoffs += 1
    world.events.append((world.t, "takeoff",
                         f"vz={vz_com:.4f} m/s"))


def _do_touchdown(world: SimWorld) -> None:
    kin = _leg_kinematics(world.params)
    wx, _ = world.wheel_center_xz()
    vz = world.com_vz
    world.mode = SimMode.CONTACT
    world.x = wx
    world.ground_z = world.terrain.elevation(wx)
    world.s_dot = world.com_vx        # no-slip re-engagement
    # vertical momentum becomes leg compression for the hips to absorb
    for i in range(2):
        j = kin.jac_of(float(world.legs[i]))
        world.leg_rates[i] = vz / j if abs(j) > 1e-6 else 0.0
    world.n_touchdowns += 1
    world.events.append((world.t, "touchdown",
                         f"vz={vz:.4f} m/s on z={world.ground_z:g}"))


def _bisect(world_pre: SimWorld, commands: ActuatorCommands, dt: float,
            crossed) -> float:
    """Earliest time in (0, dt] where `crossed(world)` first holds."""
    lo, hi = 0.0, dt
    while hi - lo > EVENT_TIME_TOL:
        mid = 0.5 * (lo + hi)
        probe = world_pre.copy()
        _rk4(probe, commands, mid)
        _clamp_leg_stops(probe)
        if crossed(probe):
            hi = mid
        else:
            lo = mid
    return hi


def _wheel_below_ground(world: SimWorld) -> bool:
    wx, wz = world.wheel_center_xz()
    return wz - world.params.wheel_radius \
        <= world.terrain.elevation(wx) + 1e-12


def physics_step(world: SimWorld, commands: ActuatorCommands,
                 dt: float, _depth: int = 0) -> SimWorld:
    """Advance by dt, locating mode transitions by bisection."""
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    p = world.params
    if np.any(np.abs(commands.wheel) > p.wheel_torque_limit + 1e-9) or \
            np.any(np.abs(commands.hip) > p.hip_torque_limit + 1e-9):
        raise ValidationError("commands exceed actuator limits")
    _apply_impulses(world)

    pre = world.copy()
    v_before = np.array(pre.com_velocity())
    _rk4(world, commands, dt)
    fold_momentum = _clamp_leg_stops(world)

    if not np.all(np.isfinite(_get_y(world))):
        world.fault = "integration_fault"
        raise IntegrationFault(
            "Physics integration produced a non-finite state")

    if world.mode is SimMode.CONTACT:
        # leg momentum slamming into the fold stop while on the back
        # pitches the torso up over the knee contact; the legs ride
        # along afterwards, so they share the post-impact inertia
        if fold_momentum > 0.0 and world.stop_lay:
            c = model.body_coeffs(p, world.model_height())
            i_legs = sum(_leg_inertia(world, float(world.legs[i]),
                                      False) for i in range(2))
            world.theta_dot += fold_momentum / (c.a_th + i_legs)
            world.events.append((world.t, "fold_stop_kick",
                                 f"dtheta_dot="
                                 f"{fold_momentum / (c.a_th + i_legs):.3f}"))
        _handle_pitch_stops(world, pre, commands, dt)
        _maybe_takeoff(world, pre, commands, dt, _depth)
        if world.mode is SimMode.CONTACT:
            _check_collision(world, pre)
    else:
        wx, wz = world.wheel_center_xz()
        clearance = (wz - p.wheel_radius
                     - world.terrain.elevation(wx))
        if not world.touchdown_armed:
            if clearance > TOUCHDOWN_ARM_CLEARANCE or \
                    world.com_vz < 0.0:
                world.touchdown_armed = True
        if world.mode is SimMode.FLIGHT:
            world.apex_gain = max(world.apex_gain,
                                  world.com_z - world.takeoff_z)
        if world.touchdown_armed and _wheel_below_ground(world) \
                and _depth < 8:
            t_star = _bisect(pre, commands, dt, _wheel_below_ground)
            world_restore(world, pre)
            _rk4(world, commands, t_star)
            _clamp_leg_stops(world)
            _do_touchdown(world)
            rest = dt - t_star
            if rest > EVENT_TIME_TOL:
                physics_step(world, commands, rest, _depth + 1)

    if _depth == 0:
        v_after = np.array(world.com_velocity())
        world.com_acc = (v_after - v_before) / dt
    return world


def world_restore(world: SimWorld, snap: SimWorld) -> None:
    """Copy the snapshot's state back into world (same object).

    Accumulated events and the takeoff/touchdown counters are left
    alone on purpose: restores only rewind within one physics step to
    re-integrate up to a located event.
    """
    for name in ("mode", "t", "theta", "theta_dot", "s", "s_dot",
                 "gamma", "gamma_dot", "x", "y", "ground_z", "com_x",
                 "com_z", "com_vx", "com_vz", "stop_sit", "stop_lay",
                 "stop_plank", "added_mass", "_dist_cursor",
                 "touchdown_armed", "takeoff_z", "apex_gain"):
        setattr(world, name, getattr(snap, name))
    world.legs = snap.legs.copy()
    world.leg_rates = snap.leg_rates.copy()
    world.com_acc = snap.com_acc.copy()


def _support_force(world: SimWorld,
                   commands: ActuatorCommands) -> float:
    """Vertical ground reaction holding the wheels down, in newtons.

    The wheels carry no vertical momentum on the ground, so the whole
    machine's vertical balance reads N = m_tot g + m_b a_z with a_z
    the tracked-mass vertical acceleration. Negative N means the
    ground would have to pull."""
    h = 1e-5
    probe = world.copy()
    v0 = probe.com_velocity()[1]
    _rk4(probe, commands, h)
    v1 = probe.com_velocity()[1]
    p = world.params
    return (p.total_mass * p.gravity
            + p.body_mass_fn.mass * (v1 - v0) / h)


def _maybe_takeoff(world: SimWorld, pre: SimWorld,
                   commands: ActuatorCommands, dt: float,
                   depth: int) -> None:
    if world.legs_locked or depth >= 8 or _pitch_locked(world):
        return                  # a stop is carrying part of the weight
    kin = _leg_kinematics(world.params)

    def unloaded(w):
        return _support_force(w, commands) <= 0.0

    if unloaded(world):
        # smooth unloading: near full stretch the linkage decelerates
        # the body harder than gravity could, so the ground reaction
        # crosses zero while the legs are still moving
        t_star = _bisect(pre, commands, dt, unloaded)
        probe = pre.copy()
        _rk4(probe, commands, t_star)
        vz_com = probe.com_velocity()[1]
        if vz_com > TAKEOFF_MIN_SPEED:
            world_restore(world, probe)
            _clamp_leg_stops(world)
            _do_takeoff(world, vz_com=vz_com, keep_leg_rates=True)
            rest = dt - t_star
            if rest > EVENT_TIME_TOL:
                physics_step(world, commands, rest, depth + 1)
            return

    def extended(w):
        return bool(np.all(w.legs <= kin.alpha_lo + 1e-9))

    if not extended(world) or extended(pre):
        return
    # legs reached the extension stop this step: find the instant and
    # decide whether the slam carries the body off the ground
    t_star = _bisect(pre, commands, dt, extended)
    probe = pre.copy()
    _rk4(probe, commands, t_star)
    vz_body = _takeoff_speed(probe)
    m_b = world.params.body_mass_fn.mass
    vz_com = m_b * vz_body / world.params.total_mass
    if vz_com <= TAKEOFF_MIN_SPEED:
        return                      # settles onto the stop instead
    world_restore(world, probe)
    _clamp_leg_stops(world)
    _do_takeoff(world, vz_com=vz_com)
    rest = dt - t_star
    if rest > EVENT_TIME_TOL:
        physics_step(world, commands, rest, depth + 1)


def _handle_pitch_stops(world: SimWorld, pre: SimWorld,
                        commands: ActuatorCommands, dt: float) -> None:
    """Engage/release the one-sided fallen-pose stops."""
    folded = world.mean_hip > SIT_LEGS_FOLDED
    # release: a stop lets go when the body accelerates off it
    for flag, bound, side in (("stop_sit", SIT_STOP_PITCH, -1),
                              ("stop_lay", LAY_STOP_PITCH, -1),
                              ("stop_plank", PLANK_STOP_PITCH, 1)):
        if getattr(world, flag):
            acc = _free_pitch_accel(world, commands)
            vel = world.theta_dot
            if side * vel < -1e-9 or (abs(vel) <= 1e-9
                                      and side * acc < -1e-9):
                setattr(world, flag, False)
            else:
                world.theta = bound
                world.theta_dot = 0.0
    # engage: crossing a bound with incoming rate; a body freshly
    # released at the bound (pre.theta == bound) must stay free or the
    # stop would re-latch on the same tick
    if not world.stop_plank and world.theta >= PLANK_STOP_PITCH \
            and world.theta_dot >= 0.0 \
            and (pre.theta < PLANK_STOP_PITCH
                 or world.theta > PLANK_STOP_PITCH + 1e-9):
        world.theta = PLANK_STOP_PITCH
        world.theta_dot = 0.0
        world.stop_plank = True
    if not world.stop_sit and folded and not world.stop_lay \
            and SIT_STOP_PITCH >= world.theta > LAY_STOP_PITCH \
            and world.theta_dot <= 0.0 and pre.theta > SIT_STOP_PITCH:
        world.theta = SIT_STOP_PITCH
        world.theta_dot = 0.0
        world.stop_sit = True
    if not world.stop_lay and world.theta <= LAY_STOP_PITCH \
            and world.theta_dot <= 0.0 \
            and (pre.theta > LAY_STOP_PITCH
                 or world.theta < LAY_STOP_PITCH - 1e-9):
        world.theta = LAY_STOP_PITCH
        world.theta_dot = 0.0
        world.stop_lay = True
        world.stop_sit = False


def _free_pitch_accel(world: SimWorld,
                      commands: ActuatorCommands) -> float:
    """Pitch acceleration if the engaged stop vanished this instant."""
    w = world.copy()
    w.stop_sit = w.stop_lay = w.stop_plank = False
    y = _get_y(w)
    y[3] = 0.0                      # held body: no pitch rate yet
    dy = _contact_derivative(w, y, commands)
    return float(dy[3])


def _check_collision(world: SimWorld, pre: SimWorld) -> None:
    """Driving into a rising step face is a scenario-ending fault."""
    lo_x, hi_x = sorted((pre.x, world.x))
    for sx, sz in world.terrain.steps:
        if lo_x < sx <= hi_x and sz > pre.ground_z:
            world.fault = "collision"
            world.events.append((world.t, "collision",
                                 f"step face at x={sx:g}"))
            return
    world.ground_z = world.terrain.elevation(world.x)


# -- sensors ----------------------------------------------------------------


def sense(world: SimWorld, noise: NoiseConfig,
          rng: np.random.Generator) -> SensorFrame:
    """Simulated sensor readout at the current instant."""
    theta, theta_dot = world.theta, world.theta_dot
    g = world.params.gravity
    # specific force: world acceleration minus gravity, in body axes
    ax, az = float(world.com_acc[0]), float(world.com_acc[1])
    fx_w, fz_w = ax, az + g
    if world.mode is SimMode.FLIGHT:
        fx_w, fz_w = 0.0, 0.0       # free fall
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    accel = np.array([cos_t * fx_w - sin_t * fz_w,
                      world.s_dot * world.gamma_dot,
                      sin_t * fx_w + cos_t * fz_w])
    gyro = np.array([-world.gamma_dot * sin_t, theta_dot,
                     world.gamma_dot * cos_t])
    gyro = gyro + noise.gyro_bias + rng.normal(0.0, noise.gyro_std, 3)
    accel = accel + rng.normal(0.0, noise.accel_std, 3)

    spin_l, spin_r = _wheel_spin_angles(world)
    enc_l, enc_r = spin_l - theta, spin_r - theta
    if noise.encoder_ticks:
        q = 2.0 * math.pi / noise.encoder_ticks
        enc_l = round(enc_l / q) * q
        enc_r = round(enc_r / q) * q
    enc_l += rng.normal(0.0, noise.encoder_std)
    enc_r += rng.normal(0.0, noise.encoder_std)
    hip_l = world.legs[0] + rng.normal(0.0, noise.encoder_std)
    hip_r = world.legs[1] + rng.normal(0.0, noise.encoder_std)

    rise = world.terrain.next_rise(world.wheel_center_xz()[0])
    if rise is None or rise[0] > TOF_MAX_RANGE:
        tof_l = tof_r = estimate.NO_RETURN
        rng.normal(0.0, noise.tof_std, 2)   # keep the stream aligned
    else:
        d = rise[0]
        tof_l = max(0.0, d + rng.normal(0.0, noise.tof_std))
        tof_r = max(0.0, d + rng.normal(0.0, noise.tof_std))
    return SensorFrame(timestamp=world.t, gyro=gyro, accel=accel,
                       wheel_angle_l=float(enc_l),
                       wheel_angle_r=float(enc_r),
                       hip_angle_l=float(hip_l),
                       hip_angle_r=float(hip_r),
                       tof_left=tof_l, tof_right=tof_r)


def _wheel_spin_angles(world: SimWorld) -> tuple[float, float]:
    """Absolute wheel angles implied by rolling (flight freezes them)."""
    r = world.params.wheel_radius
    half_w = 0.5 * world.params.track_width
    return ((world.s - half_w * world.gamma) / r,
            (world.s + half_w * world.gamma) / r)


# -- scenario configuration ---------------------------------------------------


MANEUVER_KINDS = ("jump", "recover", "descend")
POSES = ("upright", "laying", "sitting", "planking", "sideways")

# drive mode gives up beyond this tilt; maneuver logic, which hands
# the wheels over deliberately (post-jump catch, stand-up brake),
# may engage the balance controller much further out
DRIVE_STAB_CUTOUT = 0.35
FSM_STAB_CUTOUT = 1.35
# a sideways robot cannot be balanced by the wheels at all
STABILIZER_CUTOUT_ROLL = 0.5
# fraction of gravity below which the accelerometer says airborne
_AIRBORNE_ACCEL_FRAC = 0.35
# drive-mode leg servo (height hold on top of the feedforward)
DRIVE_HIP_K = 60.0
DRIVE_HIP_D = 8.0
# give a descent this long before calling it failed
DESCENT_TIMEOUT = 8.0


@dataclass(frozen=True)
class ManeuverTrigger:
    """One timed maneuver request inside a scenario."""

    time: float
    kind: str
    options: tuple = ()     # sorted (key, value) pairs

    def __post_init__(self):
        if self.kind not in MANEUVER_KINDS:
            raise ValidationError(f"unknown maneuver kind "
                                  f"{self.kind!r}")
        if not (np.isfinite(self.time) and self.time >= 0.0):
            raise ValidationError("maneuver time must be >= 0")
        opts = tuple(sorted((str(k), v) for k, v in self.options))
        object.__setattr__(self, "options", opts)

    def options_dict(self) -> dict:
        return dict(self.options)

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind,
                "options": self.options_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ManeuverTrigger":
        extra = set(d) - {"time", "kind", "options"}
        if extra:
            raise ValidationError(
                f"unknown maneuver fields {sorted(extra)}")
        return cls(time=d["time"], kind=d["kind"],
                   options=tuple(d.get("options", {}).items()))


_SCENARIO_FIELDS = {
    "duration", "seed", "dt_physics", "dt_control", "pose", "pitch",
    "travel_rate", "x0", "hip", "command_height", "leg_friction",
    "actuator_delay", "n_anchors", "params", "weights", "noise",
    "terrain", "disturbances", "setpoints", "maneuvers"}


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one simulation run."""

    duration: float
    seed: int = 0
    dt_physics: float = 1e-3
    dt_control: float = 5e-3
    pose: str = "upright"
    pitch: float = 0.0              # initial tilt for the upright pose
    travel_rate: float = 0.0
    x0: float = 0.0
    hip: float | None = None        # initial hip angle, pose default
    command_height: float | None = None   # total height to hold, m
    leg_friction: float = 0.3
    actuator_delay: float = 0.0     # s, whole control ticks
    n_anchors: int = 10
    param_overrides: tuple = ()     # sorted (field, value) pairs
    weights: LqrWeights = DEFAULT_WEIGHTS
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    terrain: Terrain = field(default_factory=Terrain)
    disturbances: tuple = ()
    setpoints: tuple = ()           # (time, v_ref, omega_ref)
    maneuvers: tuple = ()           # ManeuverTrigger

    def __post_init__(self):
        if not (np.isfinite(self.duration) and self.duration > 0.0):
            raise ValidationError("duration must be positive")
        if self.dt_physics <= 0.0:
            raise ValidationError("dt_physics must be positive")
        if self.dt_physics > self.dt_control:
            raise ValidationError(
                f"dt_physics ({self.dt_physics:g}) must not exceed "
                f"dt_control ({self.dt_control:g})")
        ratio = self.dt_control / self.dt_physics
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValidationError(
                f"dt_control ({self.dt_control:g}) must be an integer "
                f"multiple of dt_physics ({self.dt_physics:g})")
        if self.pose not in POSES:
            raise ValidationError(f"unknown pose {self.pose!r}")
        if self.actuator_delay < 0.0:
            raise ValidationError("actuator_delay must be >= 0")
        delay_ticks = self.actuator_delay / self.dt_control
        if abs(delay_ticks - round(delay_ticks)) > 1e-9:
            raise ValidationError("actuator_delay must be a multiple "
                                  "of dt_control")
        if self.n_anchors < 2:
            raise ValidationError("n_anchors must be >= 2")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "param_overrides",
                           tuple(sorted((str(k), float(v)) for k, v
                                        in self.param_overrides)))
        object.__setattr__(
            self, "disturbances",
            tuple(sorted(self.disturbances, key=lambda d: d.start)))
        sp = tuple((float(t), float(v), float(w))
                   for t, v, w in self.setpoints)
        if [t for t, _, _ in sp] != sorted(t for t, _, _ in sp):
            raise ValidationError("setpoint times must be ascending")
        for _, v, w in sp:
            VelocitySetpoint(v_ref=v, omega_ref=w)  # range check
        object.__setattr__(self, "setpoints", sp)
        object.__setattr__(
            self, "maneuvers",
            tuple(sorted(self.maneuvers, key=lambda m: m.time)))

    @cached_property
    def params(self) -> RobotParams:
        return replace(default_params(), **dict(self.param_overrides))

    def to_dict(self) -> dict:
        return {
            "duration": self.duration, "seed": self.seed,
            "dt_physics": self.dt_physics,
            "dt_control": self.dt_control, "pose": self.pose,
            "pitch": self.pitch, "travel_rate": self.travel_rate,
            "x0": self.x0, "hip": self.hip,
            "command_height": self.command_height,
            "leg_friction": self.leg_friction,
            "actuator_delay": self.actuator_delay,
            "n_anchors": self.n_anchors,
            "params": dict(self.param_overrides),
            "weights": {"q": list(self.weights.q),
                        "r": list(self.weights.r)},
            "noise": self.noise.to_dict(),
            "terrain": self.terrain.to_dict(),
            "disturbances": [d.to_dict() for d in self.disturbances],
            "setpoints": [list(s) for s in self.setpoints],
            "maneuvers": [m.to_dict() for m in self.maneuvers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        extra = set(d) - _SCENARIO_FIELDS
        if extra:
            raise ValidationError(
                f"unknown scenario fields {sorted(extra)}")
        if "duration" not in d:
            raise ValidationError("scenario needs a duration")
        kw = {k: d[k] for k in ("duration", "seed", "dt_physics",
                                "dt_control", "pose", "pitch",
                                "travel_rate", "x0", "hip",
                                "command_height", "leg_friction",
                                "actuator_delay", "n_anchors")
              if k in d}
        kw["param_overrides"] = tuple(d.get("params", {}).items())
        if "weights" in d:
            kw["weights"] = LqrWeights(
                q=np.asarray(d["weights"]["q"], dtype=float),
                r=np.asarray(d["weights"]["r"], dtype=float))
        if "noise" in d:
            kw["noise"] = NoiseConfig.from_dict(d["noise"])
        if "terrain" in d:
            kw["terrain"] = Terrain.from_dict(d["terrain"])
        kw["disturbances"] = tuple(
            DisturbanceEvent.from_dict(x)
            for x in d.get("disturbances", ()))
        kw["setpoints"] = tuple(
            tuple(s) if not isinstance(s, dict)
            else (s["time"], s.get("v", 0.0), s.get("omega", 0.0))
            for s in d.get("setpoints", ()))
        kw["maneuvers"] = tuple(ManeuverTrigger.from_dict(m)
                                for m in d.get("maneuvers", ()))
        return cls(**kw)


def _initial_world(config: ScenarioConfig) -> SimWorld:
    p = config.params
    kin = _leg_kinematics(p)
    if config.command_height is not None:
        stance = hip_angle_for_total_height(p, config.command_height)
    else:
        stance = hip_angle_for_total_height(
            p, 0.5 * (p.height_range[0] + p.height_range[1]))
    hip0 = stance if config.hip is None else float(config.hip)
    if not kin.alpha_lo <= hip0 <= kin.alpha_hi:
        raise ValidationError("initial hip angle outside the stroke")
    w = SimWorld(params=p, terrain=config.terrain,
                 disturbances=config.disturbances,
                 legs=np.full(2, hip0),
                 leg_friction=config.leg_friction,
                 x=config.x0, s_dot=config.travel_rate,
                 theta=config.pitch)
    w.ground_z = config.terrain.elevation(config.x0)
    if config.pose == "sitting":
        w.theta, w.stop_sit = SIT_STOP_PITCH, True
        if config.hip is None:
            w.legs = np.full(2, SIT_LEGS_FOLDED + 0.25)
    elif config.pose == "laying":
        w.theta, w.stop_lay = LAY_STOP_PITCH, True
    elif config.pose == "planking":
        w.theta, w.stop_plank = PLANK_STOP_PITCH, True
    elif config.pose == "sideways":
        w.theta, w.roll = 0.0, 0.9
    return w


# -- telemetry ---------------------------------------------------------------


TELEMETRY_COLUMNS = (
    "t", "mode", "owner", "phase", "stabilizer",
    "theta", "theta_dot", "travel", "travel_rate", "yaw", "yaw_rate",
    "x", "com_z",
    "hip_l", "hip_r", "hip_rate_l", "hip_rate_r",
    "est_theta", "est_theta_dot", "est_v", "est_omega", "est_h",
    "cmd_wheel_l", "cmd_wheel_r", "cmd_hip_l", "cmd_hip_r",
    "contact_wheel_l", "contact_wheel_r", "contact_leg_l",
    "contact_leg_r", "contact_body_front", "contact_body_back",
    "kinetic", "potential", "tof_left", "tof_right")


@dataclass(frozen=True)
class TelemetryRecord:
    """One control tick of truth, estimate, and commands.

    Energies are diagnostics: the potential datum is the upright body
    at the current height in contact and the ground plane in flight.
    """

    t: float
    mode: str
    owner: str
    phase: str
    stabilizer: bool
    theta: float
    theta_dot: float
    travel: float
    travel_rate: float
    yaw: float
    yaw_rate: float
    x: float
    com_z: float
    hip_l: float
    hip_r: float
    hip_rate_l: float
    hip_rate_r: float
    est_theta: float
    est_theta_dot: float
    est_v: float
    est_omega: float
    est_h: float
    cmd_wheel_l: float
    cmd_wheel_r: float
    cmd_hip_l: float
    cmd_hip_r: float
    contact_wheel_l: bool
    contact_wheel_r: bool
    contact_leg_l: bool
    contact_leg_r: bool
    contact_body_front: bool
    contact_body_back: bool
    kinetic: float
    potential: float
    tof_left: float
    tof_right: float

    def row(self) -> list:
        return [_fmt(getattr(self, c)) for c in TELEMETRY_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _world_energies(world: SimWorld) -> tuple[float, float]:
    if world.mode is SimMode.CONTACT:
        state = GeneralizedState(
            q=np.array([world.theta, world.s, world.gamma]),
            q_dot=np.array([world.theta_dot, world.s_dot,
                            world.gamma_dot]))
        return model.energies(state, world.params,
                              world.model_height())
    p = world.params
    c = model.body_coeffs(p, world.model_height())
    kinetic = (0.5 * p.total_mass
               * (world.com_vx ** 2 + world.com_vz ** 2)
               + 0.5 * c.a_th * world.theta_dot ** 2)
    return kinetic, p.total_mass * p.gravity * world.com_z


def _make_record(world: SimWorld, est: Estimate,
                 commands: ActuatorCommands, owner: str, phase: str,
                 stabilizer: bool, frame: SensorFrame
                 ) -> TelemetryRecord:
    kinetic, potential = _world_energies(world)
    con = world.contacts()
    return TelemetryRecord(
        t=world.t, mode=world.mode.value, owner=owner, phase=phase,
        stabilizer=stabilizer,
        theta=world.theta, theta_dot=world.theta_dot,
        travel=world.s, travel_rate=world.s_dot,
        yaw=world.gamma, yaw_rate=world.gamma_dot,
        x=world.x if world.mode is SimMode.CONTACT else world.com_x,
        com_z=world.com_position()[1],
        hip_l=float(world.legs[0]), hip_r=float(world.legs[1]),
        hip_rate_l=float(world.leg_rates[0]),
        hip_rate_r=float(world.leg_rates[1]),
        est_theta=float(est.x_hat.x[0]),
        est_theta_dot=float(est.x_hat.x[1]),
        est_v=float(est.x_hat.x[2]), est_omega=float(est.x_hat.x[3]),
        est_h=est.h_hat,
        cmd_wheel_l=float(commands.wheel[0]),
        cmd_wheel_r=float(commands.wheel[1]),
        cmd_hip_l=float(commands.hip[0]),
        cmd_hip_r=float(commands.hip[1]),
        contact_wheel_l=con.wheel_l, contact_wheel_r=con.wheel_r,
        contact_leg_l=con.leg_l, contact_leg_r=con.leg_r,
        contact_body_front=con.body_front,
        contact_body_back=con.body_back,
        kinetic=kinetic, potential=potential,
        tof_left=frame.tof_left, tof_right=frame.tof_right)


@dataclass(frozen=True)
class ScenarioSummary:
    success: bool
    cause: str
    t_end: float
    max_abs_pitch: float
    travel: float
    apex_gain: float
    n_takeoffs: int
    n_touchdowns: int
    final_position: str
    maneuvers: tuple            # (kind, outcome) pairs
    phase_durations: tuple      # (label, seconds) pairs

    def to_dict(self) -> dict:
        return {"success": self.success, "cause": self.cause,
                "t_end": self.t_end,
                "max_abs_pitch": self.max_abs_pitch,
                "travel": self.travel, "apex_gain": self.apex_gain,
                "n_takeoffs": self.n_takeoffs,
                "n_touchdowns": self.n_touchdowns,
                "final_position": self.final_position,
                "maneuvers": [list(m) for m in self.maneuvers],
                "phase_durations": dict(self.phase_durations)}


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    records: tuple
    events: tuple               # (time, name, detail)
    summary: ScenarioSummary


# -- scenario execution -------------------------------------------------------


def _setpoint_at(config: ScenarioConfig, t: float) -> VelocitySetpoint:
    v, w = 0.0, 0.0
    for st, sv, sw in config.setpoints:
        if st <= t + 1e-12:
            v, w = sv, sw
    return VelocitySetpoint(v_ref=v, omega_ref=w)


def _drive_hip_commands(params: RobotParams, refs, hips, rates,
                        est_theta: float) -> np.ndarray:
    """Height hold: gravity/spring feedforward plus a soft servo."""
    kin = _leg_kinematics(params)
    m_c = params.body_mass_fn.mass
    out = np.empty(2)
    for i in range(2):
        a = float(hips[i])
        ff = (-params.spring_torque(a)
              + 0.5 * m_c * params.gravity * math.cos(est_theta)
              * kin.jac_of(a))
        servo = maneuver.virtual_spring_damper(
            a, float(rates[i]), float(refs[i]), DRIVE_HIP_K,
            DRIVE_HIP_D, limit=params.hip_torque_limit)
        out[i] = ff + servo
    return np.clip(out, -params.hip_torque_limit,
                   params.hip_torque_limit)


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    """Simulate one scenario deterministically from its seed."""
    params = config.params
    rng = np.random.default_rng(config.seed)
    schedule = control.build_schedule(params, config.weights,
                                      n_heights=config.n_anchors,
                                      dt=config.dt_control)
    world = _initial_world(config)
    if config.command_height is not None:
        stance_ref = hip_angle_for_total_height(
            params, config.command_height)
    else:
        stance_ref = hip_angle_for_total_height(
            params, 0.5 * (params.height_range[0]
                           + params.height_range[1]))

    n_sub = int(round(config.dt_control / config.dt_physics))
    n_ticks = max(1, int(round(config.duration / config.dt_control)))
    delay_ticks = int(round(config.actuator_delay / config.dt_control))
    cmd_queue = deque([ActuatorCommands.zero()] * delay_ticks)

    est = None
    prev_hips = None
    hold_refs = None
    active = None               # (kind, state, cfg) while one runs
    trig_idx = 0
    records, events = [], []
    outcomes = []               # (kind, outcome)
    durations = {}              # phase label -> seconds
    fault_cause = None
    stop_early = False
    prev_label = None
    x_start = world.x
    max_pitch = abs(world.theta)
    max_travel = 0.0

    for _ in range(n_ticks):
        t = world.t
        frame = sense(world, config.noise, rng)
        in_flight = bool(np.linalg.norm(frame.accel)
                         < _AIRBORNE_ACCEL_FRAC * params.gravity)
        if est is None:
            theta0 = math.atan2(-frame.accel[0], frame.accel[2])
            est = estimate.initial_estimate(
                params,
                x0=np.array([theta0, frame.gyro[1], 0.0, 0.0]),
                h0=estimate.estimate_height(frame.hip_angle_l,
                                            frame.hip_angle_r,
                                            params))
        else:
            est = estimate.update(est, frame, params, config.noise,
                                  in_flight=in_flight)

        while trig_idx < len(config.maneuvers) and \
                config.maneuvers[trig_idx].time <= t + 1e-12:
            trig = config.maneuvers[trig_idx]
            trig_idx += 1
            if active is not None:
                events.append((t, "trigger_ignored",
                               f"{trig.kind} while {active[0]} runs"))
                continue
            if trig.kind == "jump":
                jp = JumpParams(**trig.options_dict())
                jstate = JumpState(
                    phase=JumpPhase.RETRACT_LEGS,
                    start_hip=0.5 * (frame.hip_angle_l
                                     + frame.hip_angle_r))
                active = ("jump", jstate, jp)
            elif trig.kind == "recover":
                pos = world.resting_position()
                if pos is RestingPosition.UPRIGHT:
                    events.append((t, "trigger_ignored",
                                   "recover while upright"))
                    continue
                rcfg = RecoveryConfig(params=params,
                                      **trig.options_dict())
                active = ("recover", maneuver.start_recovery(pos),
                          rcfg)
            else:
                target = RestingPosition(
                    trig.options_dict().get("target", "sitting"))
                active = ("descend", target, t)
            events.append((t, "maneuver_started", trig.kind))

        setpoint = _setpoint_at(config, t)
        owner, label = "drive", "drive"
        hips_cmd = None
        wheels_fsm = np.zeros(2)
        stab = True

        if active is not None and active[0] == "jump":
            jstate, jp = active[1], active[2]
            jstate, hips_cmd, wheels_fsm, stab = maneuver.jump_step(
                jstate, est, frame, jp, config.dt_control,
                gravity=params.gravity)
            owner, label = "jump", jstate.phase.value
            if jstate.drive_velocity != 0.0:
                setpoint = VelocitySetpoint(
                    v_ref=jstate.drive_velocity, omega_ref=0.0)
            if jstate.phase is JumpPhase.DONE:
                outcomes.append(("jump", "done"))
                events.append((t, "maneuver_done", "jump"))
                active = None
            elif jstate.phase is JumpPhase.ABORTED:
                outcomes.append(("jump", "aborted"))
                events.append((t, "maneuver_failed", "jump aborted"))
                active = None
            else:
                active = ("jump", jstate, jp)
        elif active is not None and active[0] == "recover":
            rstate, rcfg = active[1], active[2]
            pos = world.resting_position()
            rstate, hips_cmd, wheels_fsm, stab = \
                maneuver.recovery_step(
                    rstate, pos, est, config.dt_control, rcfg,
                    hip_angles=(frame.hip_angle_l,
                                frame.hip_angle_r))
            owner, label = "recover", rstate.phase.value
            if rstate.phase is RecoveryPhase.DONE:
                outcomes.append(("recover", "done"))
                events.append((t, "maneuver_done", "recover"))
                active = None
            elif rstate.phase is RecoveryPhase.UNRECOVERABLE:
                outcomes.append(("recover", "unrecoverable"))
                events.append((t, "maneuver_failed",
                               "recovery unrecoverable"))
                fault_cause = "unrecoverable"
                active = None
                stop_early = True
            else:
                active = ("recover", rstate, rcfg)
        elif active is not None:
            target, t0 = active[1], active[2]
            hips_cmd, wheels_fsm, stab = maneuver.controlled_descent(
                target, est, config.dt_control)
            owner, label = "descend", "descend"
            if world.resting_position() is target:
                outcomes.append(("descend", "done"))
                events.append((t, "maneuver_done",
                               f"descend to {target.value}"))
                active = None
            elif t - t0 > DESCENT_TIMEOUT:
                outcomes.append(("descend", "timeout"))
                events.append((t, "maneuver_failed",
                               "descent timed out"))
                fault_cause = "descent_timeout"
                active = None
                stop_early = True

        cutout = DRIVE_STAB_CUTOUT if owner == "drive" \
            else FSM_STAB_CUTOUT
        stabilizer_on = bool(
            stab and abs(est.x_hat.x[0]) < cutout
            and abs(world.roll) < STABILIZER_CUTOUT_ROLL)

        sensed_hips = (frame.hip_angle_l, frame.hip_angle_r)
        if hips_cmd is None:
            if prev_hips is None:
                hip_rates = (0.0, 0.0)
            else:
                hip_rates = tuple(
                    (a - b) / config.dt_control
                    for a, b in zip(sensed_hips, prev_hips))
            # gated out (resting or knocked over): hold the legs where
            # they were when the gate opened, so the pose keeps its
            # support instead of pulling toward stance (a reference
            # that chases the sensed angle would ratchet away)
            if stabilizer_on:
                hold_refs = None
                refs = (stance_ref, stance_ref)
            else:
                if hold_refs is None:
                    hold_refs = sensed_hips
                refs = hold_refs
            hips_cmd = _drive_hip_commands(params, refs, sensed_hips,
                                           hip_rates,
                                           float(est.x_hat.x[0]))
        else:
            hold_refs = None
        prev_hips = sensed_hips
        if stabilizer_on:
            gain = control.interpolate_gain(schedule, est.h_hat)
            wheels_cmd = control.control_law(
                gain, est.x_hat, setpoint, params.wheel_torque_limit)
        else:
            wheels_cmd = np.clip(wheels_fsm,
                                 -params.wheel_torque_limit,
                                 params.wheel_torque_limit)
        hips_cmd = np.clip(hips_cmd, -params.hip_torque_limit,
                           params.hip_torque_limit)
        cmd_queue.append(ActuatorCommands(wheel=wheels_cmd,
                                          hip=hips_cmd))
        applied = cmd_queue.popleft()

        records.append(_make_record(world, est, applied, owner, label,
                                    stabilizer_on, frame))
        full_label = f"{owner}:{label}"
        durations[full_label] = (durations.get(full_label, 0.0)
                                 + config.dt_control)
        if full_label != prev_label:
            events.append((t, "phase", full_label))
            prev_label = full_label

        est = estimate.predict(est, applied.wheel, config.dt_control,
                               params)
        try:
            for _ in range(n_sub):
                physics_step(world, applied, config.dt_physics)
                if world.fault:
                    break
        except IntegrationFault:
            fault_cause = "integration_fault"
            events.extend(world.events)
            world.events.clear()
            events.append((world.t, "fault", "integration_fault"))
            break
        events.extend(world.events)
        world.events.clear()
        max_pitch = max(max_pitch, abs(world.theta))
        max_travel = max(max_travel, abs(
            (world.x if world.mode is SimMode.CONTACT else world.com_x)
            - x_start))
        if world.fault:
            fault_cause = world.fault
            break
        if stop_early:
            break

    summary = _summarize(config, world, outcomes, durations,
                         fault_cause, max_pitch, max_travel)
    events.append((world.t, "scenario_end", summary.cause))
    return ScenarioResult(config=config, records=tuple(records),
                          events=tuple(events), summary=summary)


def _summarize(config: ScenarioConfig, world: SimWorld, outcomes,
               durations, fault_cause, max_pitch: float,
               max_travel: float) -> ScenarioSummary:
    final_position = world.resting_position()
    expected_fallen = None
    for m in config.maneuvers:
        if m.kind == "descend":
            expected_fallen = RestingPosition(
                m.options_dict().get("target", "sitting"))
    cause = fault_cause
    success = fault_cause is None
    failed = [f"{k}_{out}" for k, out in outcomes if out != "done"]
    if success and failed:
        success = False
        cause = ";".join(failed)
    if success and expected_fallen is not None:
        if final_position is not expected_fallen:
            success = False
            cause = "wrong_final_position"
    elif success:
        settled = (abs(world.theta) < 0.1
                   and abs(world.theta_dot) < 0.5
                   and world.mode is SimMode.CONTACT)
        if not settled:
            success = False
            cause = "not_settled"
    return ScenarioSummary(
        success=success, cause=cause or "completed", t_end=world.t,
        max_abs_pitch=max_pitch, travel=max_travel,
        apex_gain=world.apex_gain, n_takeoffs=world.n_takeoffs,
        n_touchdowns=world.n_touchdowns,
        final_position=final_position.value,
        maneuvers=tuple(outcomes),
        phase_durations=tuple(sorted(durations.items())))


# -- output files -------------------------------------------------------------


def write_telemetry(records, path) -> None:
    """Fixed-column CSV, floats via repr for bit-stable reruns."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TELEMETRY_COLUMNS)
        for r in records:
            writer.writerow(r.row())


def write_events(events, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("time", "event", "detail"))
        for t, name, detail in events:
            writer.writerow((_fmt(float(t)), name, detail))


def write_summary(summary: ScenarioSummary, path) -> None:
    with open(path, "w") as f:
        json.dump(summary.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
