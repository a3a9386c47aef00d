"""Physical parameters of the robot and their JSON form.

Everything downstream (dynamics, gain scheduling, estimation, the
simulator) reads the machine's constants from one `RobotParams` value.
The legs enter the rigid-body model only through the substitute-body
reduction: at each leg height the torso-plus-legs assembly is replaced
by a single pendulum with height-dependent arm and inertia, tabulated
from the linkage geometry and interpolated piecewise-linearly.

Two height conventions coexist and are easy to confuse:

* total height  -- ground to torso top, the operator-facing number
                   (`height_range`, default 0.31..0.66 m);
* leg height h  -- wheel contact point to composite CoM, the internal
                   scheduling variable every model/control operation
                   takes (`leg_height_range` maps one to the other).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from functools import cached_property, lru_cache
from importlib import resources

import numpy as np
import jsonschema

from . import linkage
from .errors import ValidationError

TOTAL_MASS = 10.4  # kg, whole machine including wheels


class BodyPoint:
    """Substitute pendulum properties at one leg height."""

    __slots__ = ("mass", "length", "i_pitch", "i_roll", "i_yaw")

    def __init__(self, mass, length, i_pitch, i_roll, i_yaw):
        self.mass = mass
        self.length = length      # m, wheel axle to CoM
        self.i_pitch = i_pitch    # kg m^2 about the CoM
        self.i_roll = i_roll
        self.i_yaw = i_yaw

    def __repr__(self):
        return ("BodyPoint(mass=%.4f, length=%.4f, i_pitch=%.4f, "
                "i_roll=%.4f, i_yaw=%.4f)" % (self.mass, self.length,
                                              self.i_pitch, self.i_roll,
                                              self.i_yaw))


@dataclass(frozen=True, eq=False)
class SubstituteBody:
    """Piecewise-linear table: leg height h -> pendulum properties.

    Heights ascend; queries outside the tabulated stroke clamp to the
    nearest end rather than extrapolate.  Mass is constant over the
    stroke (nothing leaves the body), so it is stored once.
    """

    heights: np.ndarray     # (n,) m, ascending
    hip_angles: np.ndarray  # (n,) rad, matching entries
    mass: float             # kg
    arm: np.ndarray         # (n,) m, axle to CoM
    i_pitch: np.ndarray     # (n,) kg m^2
    i_roll: np.ndarray
    i_yaw: np.ndarray

    def __call__(self, h: float) -> BodyPoint:
        hs = self.heights
        return BodyPoint(
            self.mass,
            float(np.interp(h, hs, self.arm)),
            float(np.interp(h, hs, self.i_pitch)),
            float(np.interp(h, hs, self.i_roll)),
            float(np.interp(h, hs, self.i_yaw)),
        )

    @property
    def h_range(self) -> tuple[float, float]:
        return float(self.heights[0]), float(self.heights[-1])


def substitute_body_table(design: linkage.LinkageDesign,
                          body: linkage.BodyMassModel,
                          n: int = 33) -> SubstituteBody:
    """Tabulate the composite body over the full hip stroke."""
    lo, hi = design.hip_range
    angles = np.linspace(lo, hi, n)
    rows = [linkage.composite_body(design, float(a), body) for a in angles]
    heights = np.array([r.h for r in rows])
    order = np.argsort(heights)   # h falls as the hip flexes; store ascending
    return SubstituteBody(
        heights=heights[order],
        hip_angles=angles[order],
        mass=rows[0].mass,
        arm=np.array([r.length for r in rows])[order],
        i_pitch=np.array([r.i_pitch for r in rows])[order],
        i_roll=np.array([r.i_roll for r in rows])[order],
        i_yaw=np.array([r.i_yaw for r in rows])[order],
    )


@dataclass(frozen=True)
class RobotParams:
    """All physical constants of the machine, SI units throughout.

    `height_range` is the operator-facing total height (ground to torso
    top); operations that take a leg height h must stay within
    `leg_height_range`, its image under the linkage mapping.
    """

    wheel_mass: float                  # kg, each wheel
    wheel_inertia_spin: float          # kg m^2 about the axle
    wheel_radius: float                # m
    track_width: float                 # m, lateral wheel separation
    leg_design: linkage.LinkageDesign
    body_model: linkage.BodyMassModel
    spring_stiffness: float            # N m/rad, per hip torsion spring
    spring_rest_angle: float           # rad, hip angle with spring relaxed
    gravity: float = 9.81              # m/s^2
    wheel_torque_limit: float = 3.5    # N m
    hip_torque_limit: float = 40.0     # N m
    height_range: tuple[float, float] = (0.31, 0.66)  # m, total height
    table_points: int = 33             # substitute-body table resolution

    def __post_init__(self):
        pos = {
            "wheel_mass": self.wheel_mass,
            "wheel_inertia_spin": self.wheel_inertia_spin,
            "wheel_radius": self.wheel_radius,
            "track_width": self.track_width,
            "gravity": self.gravity,
            "wheel_torque_limit": self.wheel_torque_limit,
            "hip_torque_limit": self.hip_torque_limit,
        }
        for name, value in pos.items():
            if not value > 0:
                raise ValidationError(f"{name} must be > 0, got {value}")
        if self.spring_stiffness < 0:
            raise ValidationError("spring_stiffness must be >= 0")
        lo, hi = self.height_range
        if not lo < hi:
            raise ValidationError("height_range must be increasing")
        if self.table_points < 2:
            raise ValidationError("table_points must be >= 2")
        if abs(self.body_model.wheel_radius - self.wheel_radius) > 1e-9:
            raise ValidationError(
                "body_model.wheel_radius disagrees with wheel_radius")
        a0, a1 = self.leg_design.hip_range
        reach = sorted((self.total_height_at(a0), self.total_height_at(a1)))
        if lo < reach[0] - 1e-6 or hi > reach[1] + 1e-6:
            raise ValidationError(
                f"height_range {self.height_range} exceeds the leg's "
                f"reachable span ({reach[0]:.4f}, {reach[1]:.4f})")

    # -- derived quantities ------------------------------------------------

    @cached_property
    def body_mass_fn(self) -> SubstituteBody:
        """Leg height -> substitute pendulum mass/arm/inertia table."""
        return substitute_body_table(self.leg_design, self.body_model,
                                     self.table_points)

    @property
    def total_mass(self) -> float:
        return self.body_mass_fn.mass + 2.0 * self.wheel_mass

    def total_height_at(self, hip_angle: float) -> float:
        """Ground to torso top with the wheel on the ground, upright."""
        wz = linkage.forward_kinematics(self.leg_design,
                                        hip_angle).wheel_center[1]
        return self.body_model.torso_top_z + self.wheel_radius - wz

    @cached_property
    def leg_height_range(self) -> tuple[float, float]:
        """height_range mapped through the linkage to leg heights h."""
        a_hi = hip_angle_for_total_height(self, self.height_range[0])
        a_lo = hip_angle_for_total_height(self, self.height_range[1])
        h_at = lambda a: linkage.composite_body(
            self.leg_design, a, self.body_model).h
        pair = sorted((h_at(a_hi), h_at(a_lo)))
        return (pair[0], pair[1])

    def spring_torque(self, hip_angle: float) -> float:
        """Torsion-spring hip torque at this angle (extension positive)."""
        return -self.spring_stiffness * (hip_angle - self.spring_rest_angle)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "wheel_mass": self.wheel_mass,
            "wheel_inertia_spin": self.wheel_inertia_spin,
            "wheel_radius": self.wheel_radius,
            "track_width": self.track_width,
            "leg_design": self.leg_design.to_dict(),
            "body_model": asdict(self.body_model),
            "spring_stiffness": self.spring_stiffness,
            "spring_rest_angle": self.spring_rest_angle,
            "gravity": self.gravity,
            "wheel_torque_limit": self.wheel_torque_limit,
            "hip_torque_limit": self.hip_torque_limit,
            "height_range": list(self.height_range),
            "table_points": self.table_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotParams":
        validate_params_dict(d)
        kwargs = dict(d)
        kwargs["leg_design"] = linkage.LinkageDesign.from_dict(d["leg_design"])
        kwargs["body_model"] = linkage.BodyMassModel(**d["body_model"])
        if "height_range" in d:
            kwargs["height_range"] = tuple(float(v)
                                           for v in d["height_range"])
        return cls(**kwargs)


def hip_angle_for_total_height(params: RobotParams, height: float) -> float:
    """Hip angle at which the standing robot has this total height.

    Total height falls monotonically as the hip flexes.  Out-of-band
    requests clamp to the nearest stroke end.
    """
    lo, hi = params.leg_design.hip_range
    if height >= params.total_height_at(lo):
        return lo
    if height <= params.total_height_at(hi):
        return hi
    a, b = lo, hi
    for _ in range(80):
        mid = 0.5 * (a + b)
        if params.total_height_at(mid) > height:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


@lru_cache(maxsize=1)
def _schema() -> dict:
    text = resources.files("wipbot").joinpath(
        "schemas/params.schema.json").read_text()
    return json.loads(text)


def validate_params_dict(d: dict) -> None:
    """Schema-check a raw parameter dict; raises ValidationError."""
    try:
        jsonschema.validate(d, _schema())
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"params file invalid at {path}: "
                              f"{e.message}") from e


def load_params(path) -> RobotParams:
    """Read and validate a JSON parameter file."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"params file is not valid JSON: {e}")
    return RobotParams.from_dict(raw)


def save_params(params: RobotParams, path) -> None:
    with open(path, "w") as f:
        json.dump(params.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# Defaults: the frozen leg design plus the measured mass budget.  Wheel
# mass takes up what the 10.4 kg total leaves after the substitute body
# (8.3818 kg); spin inertia treats the wheel as a uniform disc.  The
# spring is relaxed at full extension and sized to cancel the static
# gravity load on each hip at mid total height (10.786 N m at 1.0834
# rad), keeping hip motors near zero holding torque there.
def default_params() -> RobotParams:
    return RobotParams(
        wheel_mass=1.0090911,
        wheel_inertia_spin=0.0040868,
        wheel_radius=0.09,
        track_width=0.36,
        leg_design=linkage.DEFAULT_DESIGN,
        body_model=linkage.DEFAULT_BODY,
        spring_stiffness=16.737258,
        spring_rest_angle=0.4390328,
    )
