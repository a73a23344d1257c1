"""Pick-and-place trajectory and rotational-slip dynamics.

World frame: z up, ground plane z = 0.  The cuboid starts resting on the
ground, centered at the origin.  A parallel-jaw grip pinches the front and
back faces along +-y, so the only slip degree of freedom is a rotation of
the object about the y axis through the grip point.  The gripper itself
only translates and tilts about that same axis, which keeps the gravity
torque in closed form:

    tau(beta, phi) = m * g * (rx * cos(beta + phi) + rz * sin(beta + phi))

where (rx, 0, rz) is the grip-point-to-center vector in the object frame,
beta the gripper tilt and phi the slip angle.  While the friction torque
bound is not exceeded the object follows the gripper rigidly; once it
breaks loose it behaves as a damped pendulum with Coulomb friction:

    I * phi'' = tau - tau_f * sign(phi') - c * phi'

integrated with semi-implicit Euler at substeps_per_frame times the frame
rate (default 600 Hz for 60 Hz frames).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .errors import NumericalDivergence, ParamError
from .geometry import Pose, PoseLogEntry, Quaternion, quat_from_axis_angle

GRAVITY = 9.81
FPS = 60.0

PHASE_NAMES = ("approach", "grasp", "lift", "tilt", "untilt", "place", "release")

DEFAULT_PHASE_DURATIONS = {
    "approach": 1.0,
    "grasp": 0.5,
    "lift": 1.5,
    "tilt": 1.25,
    "untilt": 1.25,
    "place": 1.5,
    "release": 0.5,
}


@dataclass
class ScenarioParams:
    """Physical description of one pick-and-place sample."""

    cuboid_width: float = 0.08
    cuboid_height: float = 0.10
    cuboid_depth: float = 0.04
    cuboid_mass: float = 0.5
    grip_offset_horizontal: float = 0.0
    grip_offset_vertical: float = 0.01
    friction_torque_max: float = 0.12
    texture_ids: tuple = (0, 1, 2)
    light_azimuth: float = 0.8
    light_elevation: float = 1.0
    light_intensity: float = 0.8
    background_brightness: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("cuboid_width", "cuboid_height", "cuboid_depth", "cuboid_mass"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ParamError(f"{name} must be positive, got {v!r}")
        if self.friction_torque_max <= 0 or not math.isfinite(self.friction_torque_max):
            raise ParamError("friction_torque_max must be positive")
        if abs(self.grip_offset_horizontal) > self.cuboid_width / 2:
            raise ParamError("grip_offset_horizontal exceeds half the cuboid width")
        if not (0.0 <= self.grip_offset_vertical <= self.cuboid_height):
            raise ParamError("grip_offset_vertical must lie within [0, height]")
        if len(self.texture_ids) != 3 or any(
            not isinstance(t, (int, np.integer)) or t < 0 or t > 47 for t in self.texture_ids
        ):
            raise ParamError("texture_ids must be three integers in [0, 47]")
        if not (0.0 <= self.light_intensity <= 1.0):
            raise ParamError("light_intensity must lie in [0, 1]")
        if not (0.0 <= self.background_brightness <= 1.0):
            raise ParamError("background_brightness must lie in [0, 1]")
        if not (0.0 <= self.light_elevation <= math.pi / 2):
            raise ParamError("light_elevation must lie in [0, pi/2]")
        if not math.isfinite(self.light_azimuth):
            raise ParamError("light_azimuth must be finite")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ParamError("seed must be a non-negative integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["texture_ids"] = list(self.texture_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioParams":
        d = dict(d)
        d["texture_ids"] = tuple(d["texture_ids"])
        return cls(**d)


def grip_point(params: ScenarioParams) -> np.ndarray:
    """Grip point in the cuboid frame (origin at the cuboid center).

    Starts at the top-face center, shifted sideways by the horizontal offset
    and downward by the vertical offset.
    """
    params.validate()
    return np.array(
        [
            params.grip_offset_horizontal,
            0.0,
            params.cuboid_height / 2.0 - params.grip_offset_vertical,
        ]
    )


@dataclass(frozen=True)
class TrajectoryPhase:
    """One phase of the gripper motion; endpoints are eased with smoothstep."""

    name: str
    duration: float
    pos_start: np.ndarray
    pos_end: np.ndarray
    tilt_start: float
    tilt_end: float
    attached: bool  # object pose follows the gripper formula
    slip_enabled: bool  # slip dynamics active (object airborne)


def build_trajectory(
    params: ScenarioParams,
    durations: Optional[dict] = None,
    lift_height: float = 0.15,
    tilt_angle: float = math.radians(30.0),
) -> list[TrajectoryPhase]:
    """Seven-phase pick-and-place: hold, settle, lift, tilt, untilt, place, let go.

    The grasp is already established at t = 0 (arm approach is out of scope),
    so the camera-to-object relation is rigid from the first frame unless the
    object slips.  The object is treated as ground-supported until the lift
    phase begins and detaches at the start of release.
    """
    params.validate()
    dur = dict(DEFAULT_PHASE_DURATIONS)
    if durations:
        unknown = set(durations) - set(PHASE_NAMES)
        if unknown:
            raise ParamError(f"unknown phase names: {sorted(unknown)}")
        dur.update(durations)
    if any(d < 0 or not math.isfinite(d) for d in dur.values()):
        raise ParamError("phase durations must be finite and non-negative")
    total = sum(dur.values())
    if total <= 0.0:
        raise ParamError("total trajectory duration must be positive")
    if lift_height <= 0.0:
        raise ParamError("lift_height must be positive")

    g0 = grip_point(params) + np.array([0.0, 0.0, params.cuboid_height / 2.0])
    up = g0 + np.array([0.0, 0.0, lift_height])
    spec = [
        ("approach", g0, g0, 0.0, 0.0, True, False),
        ("grasp", g0, g0, 0.0, 0.0, True, False),
        ("lift", g0, up, 0.0, 0.0, True, True),
        ("tilt", up, up, 0.0, tilt_angle, True, True),
        ("untilt", up, up, tilt_angle, 0.0, True, True),
        ("place", up, g0, 0.0, 0.0, True, True),
        ("release", g0, g0, 0.0, 0.0, False, False),
    ]
    return [
        TrajectoryPhase(name, dur[name], p0, p1, t0, t1, att, slip)
        for name, p0, p1, t0, t1, att, slip in spec
    ]


def _smoothstep(u: float) -> float:
    return u * u * (3.0 - 2.0 * u)


def phase_at(phases: Sequence[TrajectoryPhase], t: float) -> tuple[TrajectoryPhase, float]:
    """Phase containing time t and the eased local parameter in [0, 1]."""
    acc = 0.0
    last = None
    for ph in phases:
        if ph.duration == 0.0:
            continue
        last = ph
        if t < acc + ph.duration:
            return ph, _smoothstep((t - acc) / ph.duration)
        acc += ph.duration
    if last is None:
        raise ParamError("trajectory has no phases with positive duration")
    return last, 1.0


def gripper_state_at(phases: Sequence[TrajectoryPhase], t: float) -> tuple[np.ndarray, float]:
    """Gripper position and tilt angle (about world y) at time t."""
    ph, s = phase_at(phases, t)
    pos = ph.pos_start + (ph.pos_end - ph.pos_start) * s
    tilt = ph.tilt_start + (ph.tilt_end - ph.tilt_start) * s
    return pos, tilt


def total_duration(phases: Sequence[TrajectoryPhase]) -> float:
    return sum(ph.duration for ph in phases)


def _quat_about_y(angle: float) -> Quaternion:
    h = 0.5 * angle
    return Quaternion(math.cos(h), 0.0, math.sin(h), 0.0)


def simulate_slip(
    params: ScenarioParams,
    phases: Optional[Sequence[TrajectoryPhase]] = None,
    substeps_per_frame: int = 10,
    fps: float = FPS,
) -> list[PoseLogEntry]:
    """Integrate the slip DOF and return the 60 Hz pose log.

    Stick-slip rule: while at rest the object stays put until the gravity
    torque magnitude exceeds friction_torque_max; while moving it feels
    kinetic friction of the same magnitude plus viscous damping, and it
    re-sticks when its angular velocity crosses zero inside the static
    friction cone.
    """
    params.validate()
    if phases is None:
        phases = build_trajectory(params)
    if substeps_per_frame < 1:
        raise ParamError("substeps_per_frame must be >= 1")
    total = total_duration(phases)
    if total <= 0.0:
        raise ParamError("total trajectory duration must be positive")
    n_frames = int(round(total * fps))
    if n_frames < 1:
        raise ParamError("trajectory too short for a single frame")

    m = params.cuboid_mass
    r_o = -grip_point(params)  # grip point -> center, object frame
    rx, rz = float(r_o[0]), float(r_o[2])
    rho = math.hypot(rx, rz)
    inertia = m * (params.cuboid_width**2 + params.cuboid_height**2) / 12.0 + m * rho * rho
    tau_f = params.friction_torque_max
    damping = 0.05 * math.sqrt(inertia * m * GRAVITY * rho)
    dt = 1.0 / (fps * substeps_per_frame)
    center0 = np.array([0.0, 0.0, params.cuboid_height / 2.0])

    def gravity_torque(beta: float, phi: float) -> float:
        a = beta + phi
        return m * GRAVITY * (rx * math.cos(a) + rz * math.sin(a))

    phi = 0.0
    omega = 0.0
    stuck = True
    frozen: Optional[Pose] = None

    def object_pose(t: float, pos_g: np.ndarray, beta: float) -> Pose:
        nonlocal frozen
        ph, _ = phase_at(phases, t)
        if ph.attached:
            a = beta + phi
            q = _quat_about_y(a)
            ca, sa = math.cos(a), math.sin(a)
            off = np.array([rx * ca + rz * sa, 0.0, -rx * sa + rz * ca])
            frozen = Pose(q, pos_g + off)
            return frozen
        if frozen is None:
            frozen = Pose(_quat_about_y(0.0), center0.copy())
        return frozen

    log: list[PoseLogEntry] = []
    for k in range(n_frames):
        t_k = k / fps
        pos_g, beta = gripper_state_at(phases, t_k)
        gq = _quat_about_y(beta)
        log.append(
            PoseLogEntry(
                index=k,
                t=t_k,
                gripper=Pose(gq, pos_g),
                cube=object_pose(t_k, pos_g, beta),
            )
        )
        if k == n_frames - 1:
            break
        for j in range(substeps_per_frame):
            t = t_k + j * dt
            ph, _ = phase_at(phases, t)
            if not ph.slip_enabled:
                continue
            _, beta_t = gripper_state_at(phases, t)
            tau_g = gravity_torque(beta_t, phi)
            if stuck:
                if abs(tau_g) <= tau_f:
                    continue
                stuck = False
            sgn = math.copysign(1.0, omega) if omega != 0.0 else math.copysign(1.0, tau_g)
            tau_net = tau_g - tau_f * sgn - damping * omega
            omega_new = omega + dt * tau_net / inertia
            if omega != 0.0 and (omega_new == 0.0 or (omega_new < 0.0) != (omega < 0.0)):
                if abs(tau_g) <= tau_f:
                    omega_new = 0.0
                    stuck = True
            omega = omega_new
            phi += dt * omega
            if not (math.isfinite(phi) and math.isfinite(omega)):
                raise NumericalDivergence(
                    f"slip state became non-finite at t={t:.4f} s"
                )
    return log


def relative_slip_angle(log: Sequence[PoseLogEntry]) -> np.ndarray:
    """Signed object-minus-gripper rotation about y, per frame (radians)."""
    out = np.empty(len(log), dtype=np.float64)
    for i, e in enumerate(log):
        rel = e.gripper.quat.conjugate()
        q = e.cube.quat
        # conj(g) * c for rotations about y has only w and y components
        w = rel.w * q.w - rel.y * q.y
        y = rel.w * q.y + rel.y * q.w
        out[i] = 2.0 * math.atan2(y, w)
    return out
