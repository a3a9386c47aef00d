"""Leg linkage kinematics and straight-line synthesis.

Each leg is a closed-loop four-bar that converts one hip motor rotation
into an approximately vertical wheel translation:

    body frame: x forward, z up, hip pivot at the origin O

        O (hip, driven)      P = (pivot_x, pivot_z), fixed to body
         \\                  /
          \\  thigh         /  rocker
           \\              /
            K ------ J ---'
                      \\
                       \\      shank: one rigid bar K -> W,
                        W      rocker attaches at J on that bar

The hip motor sets the thigh angle, the rocker closes the loop through
the joint J located a fixed fraction of the way down the shank, and the
wheel axle sits at the shank end W.  Six numbers fix the geometry: the
thigh, shank and rocker lengths, the attachment fraction |KJ| / |KW|,
and the two coordinates of P.  `optimize` searches those six for the
design whose wheel path best approximates a vertical line, which is
what makes a single substitute-pendulum model per leg height work.

Angles are measured so that `hip_angle = 0` points the thigh straight
down; positive angles swing the knee forward.  Both legs are assumed
mirror-identical, so all functions work on one leg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import AssemblyError, OptimizationError

# Intersection heights below this fraction of the attach radius count as
# a fold singularity: the loop is about to flip assembly branches.
_BRANCH_TOL = 1e-9

_DEFAULT_HIP_RANGE = (0.4390328, 1.7609043)


@dataclass(frozen=True)
class LinkageDesign:
    """Six-parameter leg geometry plus its operating hip-angle range."""

    thigh: float        # m, hip pivot O to knee K
    shank: float        # m, knee K to wheel axle W (one rigid bar)
    attach_frac: float  # |KJ| / |KW|, rocker attachment point on the shank
    rocker: float       # m, fixed pivot P to attachment joint J
    pivot_x: float      # m, fixed pivot P, body frame
    pivot_z: float      # m
    hip_range: tuple[float, float] = _DEFAULT_HIP_RANGE  # rad, stroke

    def __post_init__(self):
        if min(self.thigh, self.shank, self.rocker) <= 0.0:
            raise ValueError("bar lengths must be positive")
        if not 0.0 < self.attach_frac <= 1.0:
            raise ValueError("attach_frac must lie in (0, 1]")
        lo, hi = self.hip_range
        if not hi > lo:
            raise ValueError("hip_range must be increasing")

    def as_array(self) -> np.ndarray:
        """The six design parameters as a vector (range excluded)."""
        return np.array([self.thigh, self.shank, self.attach_frac,
                         self.rocker, self.pivot_x, self.pivot_z])

    @classmethod
    def from_array(cls, p, hip_range=_DEFAULT_HIP_RANGE) -> "LinkageDesign":
        t, s, f, r, px, pz = (float(v) for v in p)
        return cls(t, s, f, r, px, pz, tuple(hip_range))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hip_range"] = list(self.hip_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LinkageDesign":
        return cls(
            thigh=float(d["thigh"]),
            shank=float(d["shank"]),
            attach_frac=float(d["attach_frac"]),
            rocker=float(d["rocker"]),
            pivot_x=float(d["pivot_x"]),
            pivot_z=float(d["pivot_z"]),
            hip_range=tuple(float(v) for v in
                            d.get("hip_range", _DEFAULT_HIP_RANGE)),
        )


@dataclass(frozen=True)
class LegPose:
    """One solved leg configuration."""

    hip_angle: float            # rad
    wheel_center: tuple[float, float]  # (x, z) m, body frame
    h: float                    # m, wheel contact point to composite CoM


@dataclass(frozen=True)
class BodyMassModel:
    """Mass layout used to reduce torso + legs to one substitute body.

    The torso numbers are estimates for a battery-dense box between the
    hips; bars are slender rods at `bar_density` kg per meter.  Only the
    totals matter downstream: the reduction sums everything above the
    axles into one pendulum.
    """

    torso_mass: float = 6.3        # kg
    torso_com_x: float = -0.0988   # m, keeps total CoM over the wheel line
    torso_com_z: float = 0.020     # m
    torso_i_pitch: float = 0.060   # kg m^2 about its own CoM
    torso_i_yaw: float = 0.070     # kg m^2
    torso_i_roll: float = 0.065    # kg m^2
    torso_top_z: float = 0.1471982  # m, top surface above hip axis
    bar_density: float = 1.327     # kg/m, linkage bars
    wheel_radius: float = 0.09     # m
    lateral_offset: float = 0.18   # m, sagittal leg plane from centerline


DEFAULT_BODY = BodyMassModel()


@dataclass(frozen=True)
class CompositeBody:
    """Torso + both legs lumped into one rigid body at a fixed hip angle."""

    mass: float        # kg, everything except the wheels
    com: tuple[float, float]   # (x, z) m, body frame
    i_pitch: float     # kg m^2 about the CoM, pitch axis
    i_yaw: float       # kg m^2 about the vertical axis through the CoM
    i_roll: float      # kg m^2 about the forward axis through the CoM
    length: float      # m, CoM to wheel axle (pendulum arm)
    h: float           # m, CoM to wheel ground contact


def _solve_joint(design: LinkageDesign, hip_angle: float):
    """Knee K, rocker joint J, wheel W for one hip angle (fixed branch)."""
    t = design.thigh
    kx = t * math.sin(hip_angle)
    kz = -t * math.cos(hip_angle)
    l2 = design.attach_frac * design.shank
    dx = design.pivot_x - kx
    dz = design.pivot_z - kz
    d2 = dx * dx + dz * dz
    dd = math.sqrt(d2)
    if dd < 1e-12:
        raise AssemblyError("rocker pivot coincides with the knee")
    a = (l2 * l2 - design.rocker ** 2 + d2) / (2.0 * dd)
    hh = l2 * l2 - a * a
    if hh <= _BRANCH_TOL:
        raise AssemblyError(
            f"loop does not close at hip_angle={hip_angle:.4f} "
            f"(attach/rocker circles miss or fold)")
    hroot = math.sqrt(hh)
    ux, uz = dx / dd, dz / dd
    jx = kx + a * ux - uz * hroot
    jz = kz + a * uz + ux * hroot
    inv = 1.0 / design.attach_frac
    wx = kx + (jx - kx) * inv
    wz = kz + (jz - kz) * inv
    return (kx, kz), (jx, jz), (wx, wz)


def joint_positions(design: LinkageDesign, hip_angle: float) -> dict:
    """All joint coordinates at one pose, keyed by joint name."""
    (kx, kz), (jx, jz), (wx, wz) = _solve_joint(design, hip_angle)
    return {
        "hip": (0.0, 0.0),
        "knee": (kx, kz),
        "coupler": (jx, jz),
        "wheel": (wx, wz),
        "pivot": (design.pivot_x, design.pivot_z),
    }


def loop_residuals(design: LinkageDesign, hip_angle: float) -> np.ndarray:
    """Closure constraint residuals at a solved pose (all ~0 when valid)."""
    (kx, kz), (jx, jz), (wx, wz) = _solve_joint(design, hip_angle)
    l2 = design.attach_frac * design.shank
    r = np.array([
        math.hypot(kx, kz) - design.thigh,
        math.hypot(jx - kx, jz - kz) - l2,
        math.hypot(jx - design.pivot_x, jz - design.pivot_z) - design.rocker,
        math.hypot(wx - kx, wz - kz) - design.shank,
    ])
    return r


def composite_body(design: LinkageDesign, hip_angle: float,
                   body: BodyMassModel = DEFAULT_BODY) -> CompositeBody:
    """Lump torso and both legs into the substitute body for this pose.

    Bars are treated as slender rods; both legs are identical and move
    together, so one leg is computed and doubled.  Wheel mass is
    excluded here; the pendulum model keeps wheels as separate bodies.
    """
    (kx, kz), (jx, jz), (wx, wz) = _solve_joint(design, hip_angle)
    rho = body.bar_density
    # (mass, com_x, com_z, own pitch inertia) per sagittal-plane part
    parts = []
    mt = rho * design.thigh
    parts.append((mt, kx / 2, kz / 2, mt * design.thigh ** 2 / 12))
    ms = rho * design.shank
    parts.append((ms, (kx + wx) / 2, (kz + wz) / 2,
                  ms * design.shank ** 2 / 12))
    mr = rho * design.rocker
    parts.append((mr, (design.pivot_x + jx) / 2, (design.pivot_z + jz) / 2,
                  mr * design.rocker ** 2 / 12))
    # both legs move together: double the single computed leg
    parts = [(2 * m, x, z, 2 * i) for (m, x, z, i) in parts]
    parts.append((body.torso_mass, body.torso_com_x, body.torso_com_z,
                  body.torso_i_pitch))
    mass = sum(p[0] for p in parts)
    cx = sum(p[0] * p[1] for p in parts) / mass
    cz = sum(p[0] * p[2] for p in parts) / mass
    i_pitch = sum(i + m * ((x - cx) ** 2 + (z - cz) ** 2)
                  for m, x, z, i in parts)
    # legs sit in sagittal planes at +-lateral_offset; torso on centerline
    lat2 = body.lateral_offset ** 2
    i_yaw = body.torso_i_yaw + body.torso_mass * (body.torso_com_x - cx) ** 2
    i_yaw += sum(m * ((x - cx) ** 2 + lat2) for m, x, z, i in parts[:-1])
    i_roll = body.torso_i_roll + body.torso_mass * (body.torso_com_z - cz) ** 2
    i_roll += sum(m * ((z - cz) ** 2 + lat2) for m, x, z, i in parts[:-1])
    length = math.hypot(cx - wx, cz - wz)
    h = math.hypot(cx - wx, cz - (wz - body.wheel_radius))
    return CompositeBody(mass=mass, com=(cx, cz), i_pitch=i_pitch,
                         i_yaw=i_yaw, i_roll=i_roll, length=length, h=h)


def forward_kinematics(design: LinkageDesign,
                       hip_angle: float) -> LegPose:
    """Solve the loop at one hip angle.

    Raises AssemblyError when the attach and rocker circles cannot
    intersect (the design does not close at this angle).
    """
    _, _, (wx, wz) = _solve_joint(design, hip_angle)
    comp = composite_body(design, hip_angle)
    return LegPose(hip_angle=float(hip_angle), wheel_center=(wx, wz),
                   h=comp.h)


def _batch_sweep(params: np.ndarray, alphas: np.ndarray):
    """Wheel paths for many designs at once.

    params: (N, 6) rows of [thigh, shank, attach_frac, rocker, px, pz];
    alphas: (M,).  Returns wx, wz with shape (N, M); NaN where the loop
    fails to close.
    """
    t = params[:, 0:1]
    l2 = params[:, 2:3] * params[:, 1:2]
    frac = params[:, 2:3]
    c = params[:, 3:4]
    px = params[:, 4:5]
    pz = params[:, 5:6]
    kx = t * np.sin(alphas)[None, :]
    kz = -t * np.cos(alphas)[None, :]
    dx = px - kx
    dz = pz - kz
    d2 = dx * dx + dz * dz
    with np.errstate(invalid="ignore", divide="ignore"):
        dd = np.sqrt(d2)
        a = (l2 * l2 - c * c + d2) / (2.0 * dd)
        hh = l2 * l2 - a * a
        good = (hh > _BRANCH_TOL) & (dd > 1e-12)
        hroot = np.sqrt(np.where(good, hh, np.nan))
        ux, uz = dx / dd, dz / dd
        jx = kx + a * ux - uz * hroot
        jz = kz + a * uz + ux * hroot
        wx = kx + (jx - kx) / frac
        wz = kz + (jz - kz) / frac
    return wx, wz


def assembles_over_range(design: LinkageDesign, n_samples: int = 128) -> bool:
    """True when the loop closes at every sampled angle of the range."""
    lo, hi = design.hip_range
    wx, _ = _batch_sweep(design.as_array()[None, :],
                         np.linspace(lo, hi, n_samples))
    return bool(np.all(np.isfinite(wx)))


def straightness_error(design: LinkageDesign, target_line: float,
                       n_samples: int = 100,
                       hip_range: tuple[float, float] | None = None) -> float:
    """Mean squared x-deviation of the wheel path from a vertical line.

    `target_line` is the x-position of the line (callers typically pass
    the x of the balanced CoM).  Samples the hip range uniformly,
    endpoints included.  Returns inf if the design fails to assemble
    anywhere in the range, so searches can treat failures as ordinary
    bad values.
    """
    lo, hi = hip_range if hip_range is not None else design.hip_range
    alphas = np.linspace(lo, hi, n_samples)
    wx, _ = _batch_sweep(design.as_array()[None, :], alphas)
    if not np.all(np.isfinite(wx)):
        return math.inf
    dev = wx[0] - target_line
    return float(np.mean(dev * dev))


def _mse_batch(params: np.ndarray, alphas: np.ndarray,
               target_line: float) -> np.ndarray:
    """Straightness MSE for (N, 6) designs; inf where any pose fails."""
    wx, _ = _batch_sweep(params, alphas)
    dev = wx - target_line
    out = np.mean(dev * dev, axis=1)
    out[~np.all(np.isfinite(wx), axis=1)] = np.inf
    return out


def optimize(initial: LinkageDesign, bounds, target_line: float,
             *, n_samples: int = 25, seed: int = 0, restarts: int = 12,
             step_tol: float = 1e-7,
             max_evals: int = 20000) -> LinkageDesign:
    """Minimize straightness error over the six geometry parameters.

    Direct search: coordinate moves with a shrinking step (bounds are
    enforced by clamping), restarted from `restarts` seeded uniform
    draws plus the initial design and, when it fits the bounds, the
    shipped default.  Deterministic for a given seed.  The hip range of
    `initial` is kept fixed throughout.  `max_evals` bounds the work
    per start; the straightness landscape has long curved valleys that
    a coordinate search can otherwise crawl along near-indefinitely.

    Raises OptimizationError when no starting point assembles anywhere
    in the hip range.
    """
    lob = np.array([b[0] for b in bounds], dtype=float)
    hib = np.array([b[1] for b in bounds], dtype=float)
    if lob.shape != (6,) or np.any(hib < lob):
        raise OptimizationError("bounds must be six nonempty intervals")
    lo, hi = initial.hip_range
    alphas = np.linspace(lo, hi, n_samples)

    def mse_of(p: np.ndarray) -> float:
        return float(_mse_batch(p[None, :], alphas, target_line)[0])

    rng = np.random.default_rng(seed)
    seeds = [np.clip(initial.as_array(), lob, hib)]
    dflt = DEFAULT_DESIGN.as_array()
    if np.all(dflt >= lob) and np.all(dflt <= hib):
        seeds.append(dflt)
    draws = rng.uniform(lob, hib, size=(max(restarts * 30, 60), 6))
    draw_mse = _mse_batch(draws, alphas, target_line)
    order = np.argsort(draw_mse)
    seeds.extend(draws[i] for i in order[:restarts]
                 if np.isfinite(draw_mse[i]))

    span = np.maximum(hib - lob, 1e-9)
    best_p, best_f = None, math.inf
    for p0 in seeds:
        p = p0.copy()
        f = mse_of(p)
        if not math.isfinite(f):
            continue
        steps = span * 0.05
        evals = 0
        while steps.max() > step_tol and evals < max_evals:
            improved = False
            for i in range(6):
                for sgn in (1.0, -1.0):
                    trial = p.copy()
                    trial[i] = min(max(trial[i] + sgn * steps[i], lob[i]),
                                   hib[i])
                    if trial[i] == p[i]:
                        continue
                    ft = mse_of(trial)
                    evals += 1
                    if ft < f:
                        p, f = trial, ft
                        improved = True
                        break
            if not improved:
                steps *= 0.5
        if f < best_f:
            best_p, best_f = p, f
    if best_p is None:
        raise OptimizationError(
            "no feasible design: every start fails to assemble over "
            f"hip range ({lo:.3f}, {hi:.3f})")
    if best_f >= mse_of(np.clip(initial.as_array(), lob, hib)):
        # never return something worse than a feasible initial
        init_clipped = np.clip(initial.as_array(), lob, hib)
        if math.isfinite(mse_of(init_clipped)):
            best_p = init_clipped
    return LinkageDesign.from_array(best_p, hip_range=initial.hip_range)


def sweep_path(design: LinkageDesign, n_samples: int = 200) -> np.ndarray:
    """(n, 4) array of [hip_angle, wheel_x, wheel_z, h] over the range."""
    lo, hi = design.hip_range
    alphas = np.linspace(lo, hi, n_samples)
    out = np.empty((n_samples, 4))
    for i, a in enumerate(alphas):
        pose = forward_kinematics(design, a)
        out[i] = (a, pose.wheel_center[0], pose.wheel_center[1], pose.h)
    return out


def hip_angle_for_height(design: LinkageDesign, h: float,
                         body: BodyMassModel = DEFAULT_BODY) -> float:
    """Invert the monotone h(hip_angle) map by bisection.

    Values outside the reachable band clamp to the nearest stroke end.
    """
    lo, hi = design.hip_range
    h_lo = composite_body(design, lo, body).h
    h_hi = composite_body(design, hi, body).h
    increasing = h_hi > h_lo
    h_min, h_max = min(h_lo, h_hi), max(h_lo, h_hi)
    if h <= h_min:
        return lo if h_lo <= h_hi else hi
    if h >= h_max:
        return hi if h_hi >= h_lo else lo
    a, b = lo, hi
    for _ in range(60):
        mid = 0.5 * (a + b)
        if (composite_body(design, mid, body).h < h) == increasing:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


# Frozen output of tools/make_default_design.py (surveyed, feasibility
# checked, and polished; see that script for the derivation).  Over the
# shipped hip range the wheel path stays within 3.2 mm of the vertical
# line x = DEFAULT_TARGET_X, the stroke spans exactly 0.350 m, and the
# worst transmission angle keeps sin >= 0.19.
DEFAULT_DESIGN = LinkageDesign(
    thigh=0.1976839,
    shank=0.2853791,
    attach_frac=0.2631250,
    rocker=0.3013446,
    pivot_x=-0.1732980,
    pivot_z=-0.0353944,
    hip_range=_DEFAULT_HIP_RANGE,
)

# x of the vertical target line: where the balanced CoM sits (mean
# wheel x over the stroke; the torso CoM offset keeps total CoM here).
DEFAULT_TARGET_X = -0.06681

# Search box for the six parameters [thigh, shank, attach_frac, rocker,
# pivot_x, pivot_z]; brackets the default design with working margin.
DEFAULT_BOUNDS = (
    (0.10, 0.32),
    (0.16, 0.32),
    (0.18, 0.60),
    (0.12, 0.32),
    (-0.30, 0.10),
    (-0.20, 0.12),
)
