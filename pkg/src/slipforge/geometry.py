"""Rotation utilities and the slip-angle ground truth.

Orientations are unit quaternions in (w, x, y, z) order or 3x3 rotation
matrices.  The slip angle between a gripper and a grasped object is the
geodesic angle between their orientation changes relative to a common
starting frame: only rotation of the object *relative to the gripper*
counts, shared motion cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, InvalidRotation, ParseError

_NORM_TOL = 1e-9
_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion, scalar first."""

    w: float
    x: float
    y: float
    z: float

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0 or not math.isfinite(n):
            raise InvalidRotation("cannot normalize zero or non-finite quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def canonical(self) -> "Quaternion":
        """Flip sign so w >= 0 (ties broken on x, then y, then z)."""
        for c in (self.w, self.x, self.y, self.z):
            if c > 0.0:
                return self
            if c < 0.0:
                return Quaternion(-self.w, -self.x, -self.y, -self.z)
        return self

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)


IDENTITY_QUAT = Quaternion(1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Pose:
    """Rigid pose: orientation plus position (meters)."""

    quat: Quaternion
    pos: np.ndarray  # shape (3,)


def quat_mul(a: Quaternion, b: Quaternion) -> Quaternion:
    return Quaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def quat_rotate(q: Quaternion, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q."""
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> Quaternion:
    ax = np.asarray(axis, dtype=np.float64)
    n = float(np.linalg.norm(ax))
    if n == 0.0:
        raise InvalidRotation("rotation axis must be nonzero")
    ax = ax / n
    h = 0.5 * angle
    s = math.sin(h)
    return Quaternion(math.cos(h), ax[0] * s, ax[1] * s, ax[2] * s)


def quat_to_matrix(q: Quaternion) -> np.ndarray:
    """Rotation matrix of q.  Renormalizes internally; zero norm is an error."""
    n = q.norm()
    if n == 0.0 or not math.isfinite(n):
        raise InvalidRotation("quaternion has zero or non-finite norm")
    w, x, y, z = q.w / n, q.x / n, q.y / n, q.z / n
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(m: np.ndarray) -> Quaternion:
    """Quaternion of a rotation matrix (canonical sign)."""
    check_rotation_matrix(m)
    t = float(np.trace(m))
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = Quaternion(
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        )
    else:
        i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2.0
        comp = [0.0, 0.0, 0.0]
        comp[i] = 0.25 * s
        comp[j] = (m[j, i] + m[i, j]) / s
        comp[k] = (m[k, i] + m[i, k]) / s
        q = Quaternion((m[k, j] - m[j, k]) / s, comp[0], comp[1], comp[2])
    return q.normalized().canonical()


def check_rotation_matrix(m: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    """Raise InvalidRotation unless m is a proper rotation within tol."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidRotation("rotation matrix must be a finite 3x3 array")
    err = float(np.max(np.abs(m.T @ m - np.eye(3))))
    if err > tol:
        raise InvalidRotation(f"matrix is not orthonormal (deviation {err:.3g})")
    if np.linalg.det(m) < 0.0:
        raise InvalidRotation("matrix has negative determinant (reflection)")


def rotation_angle(m: np.ndarray) -> float:
    """Angle of a rotation matrix, clamped into [0, pi]; never NaN."""
    c = (float(np.trace(m)) - 1.0) / 2.0
    c = min(1.0, max(-1.0, c))
    return abs(math.acos(c))


def angular_difference(
    base_gripper: np.ndarray,
    base_cube: np.ndarray,
    cur_gripper: np.ndarray,
    cur_cube: np.ndarray,
) -> float:
    """Angle (radians) between the gripper's and the object's orientation change.

    Each orientation change is measured against its own base frame, so any
    motion shared by gripper and object cancels and only relative rotation
    remains.  Result lies in [0, pi].
    """
    for m in (base_gripper, base_cube, cur_gripper, cur_cube):
        check_rotation_matrix(m)
    d_gripper = cur_gripper @ base_gripper.T
    d_cube = cur_cube @ base_cube.T
    # equal change matrices have angle zero by definition; skipping the trace
    # arithmetic keeps the result exact instead of sqrt(eps)-fuzzy
    if np.array_equal(d_gripper, d_cube):
        return 0.0
    return rotation_angle(d_gripper.T @ d_cube)


def angular_difference_quat(
    base_gripper: Quaternion,
    base_cube: Quaternion,
    cur_gripper: Quaternion,
    cur_cube: Quaternion,
) -> float:
    return angular_difference(
        quat_to_matrix(base_gripper),
        quat_to_matrix(base_cube),
        quat_to_matrix(cur_gripper),
        quat_to_matrix(cur_cube),
    )


@dataclass(frozen=True)
class PoseLogEntry:
    index: int
    t: float
    gripper: Pose
    cube: Pose


def theta_series(log: Sequence[PoseLogEntry]) -> np.ndarray:
    """Slip angle per frame against the first entry's orientations.

    The first frame defines the base orientations, so theta[0] is exactly 0.
    """
    if len(log) == 0:
        raise EmptyInput("pose log is empty")
    base_g = quat_to_matrix(log[0].gripper.quat)
    base_c = quat_to_matrix(log[0].cube.quat)
    out = np.empty(len(log), dtype=np.float64)
    out[0] = 0.0
    for i in range(1, len(log)):
        out[i] = angular_difference(
            base_g,
            base_c,
            quat_to_matrix(log[i].gripper.quat),
            quat_to_matrix(log[i].cube.quat),
        )
    return out


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_pose_log(log: Sequence[PoseLogEntry], path) -> None:
    """One line per frame: index, time, gripper quat/pos, cube quat/pos.

    Quaternions are serialized with canonical sign (w >= 0).
    """
    with open(path, "w") as fh:
        for e in log:
            qg = e.gripper.quat.canonical()
            qc = e.cube.quat.canonical()
            fields = (
                [str(e.index), _fmt(e.t)]
                + [_fmt(v) for v in (qg.w, qg.x, qg.y, qg.z)]
                + [_fmt(v) for v in e.gripper.pos]
                + [_fmt(v) for v in (qc.w, qc.x, qc.y, qc.z)]
                + [_fmt(v) for v in e.cube.pos]
            )
            fh.write(" ".join(fields) + "\n")


def read_pose_log(path) -> list[PoseLogEntry]:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 16:
                raise ParseError(f"expected 16 fields, got {len(parts)}", line=lineno)
            try:
                idx = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"bad numeric field: {exc}", line=lineno) from None
            gq = Quaternion(vals[1], vals[2], vals[3], vals[4])
            cq = Quaternion(vals[8], vals[9], vals[10], vals[11])
            if abs(gq.norm() - 1.0) > 1e-6 or abs(cq.norm() - 1.0) > 1e-6:
                raise ParseError("quaternion is not unit length", line=lineno)
            entries.append(
                PoseLogEntry(
                    index=idx,
                    t=vals[0],
                    gripper=Pose(gq, np.array(vals[5:8])),
                    cube=Pose(cq, np.array(vals[12:15])),
                )
            )
    return entries
