"""Rigid-body math for serial manipulators.

Covers modified Denavit-Hartenberg link transforms, forward-kinematic
chains, geometric Jacobians, quaternion/axis-angle conversions, the
closed-form three-link planar arm, and the weighted end-effector pose
error used by the simulator as its tracking cost.

Everything here is a pure function over immutable inputs (float64
throughout), so concurrent callers need no locking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EZ = np.array([0.0, 0.0, 1.0])

ROTATION_TOL = 1e-9       # orthonormality tolerance for produced transforms
ROTATION_INPUT_TOL = 1e-6  # tolerance accepted on externally supplied matrices


@dataclass(frozen=True)
class DHRow:
    """One modified-DH link row.

    ``a`` (link length, m), ``d`` (link offset, m) and ``alpha`` (link
    twist, rad) are mechanical constants; the row is completed at
    runtime by the angle of joint ``joint_index`` (1-based).
    """

    a: float
    d: float
    alpha: float
    joint_index: int

    def __post_init__(self) -> None:
        for name in ("a", "d", "alpha"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"DHRow.{name} must be finite")
        if self.joint_index < 1:
            raise ValueError("joint_index is 1-based and must be >= 1")


@dataclass(frozen=True)
class KinematicChain:
    """Ordered modified-DH rows of a serial arm; one row per joint."""

    rows: tuple[DHRow, ...]

    def __post_init__(self) -> None:
        if len(self.rows) < 1:
            raise ValueError("a chain needs at least one row")
        indices = [r.joint_index for r in self.rows]
        if sorted(indices) != list(range(1, len(self.rows) + 1)):
            raise ValueError("rows must carry joint indices 1..I exactly once")

    @property
    def joint_count(self) -> int:
        return len(self.rows)


@dataclass(frozen=True, eq=False)
class Transform:
    """Rigid transform split into a 3x3 rotation and a 3-vector translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=float)
        tr = np.asarray(self.translation, dtype=float).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        _check_rotation(rot, ROTATION_TOL)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    def compose(self, other: "Transform") -> "Transform":
        """self applied after ``other`` is applied in self's frame: T_self * T_other."""
        return Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Transform") -> "Transform":
        return self.compose(other)

    def as_matrix(self) -> np.ndarray:
        """Homogeneous 4x4 with bottom row [0, 0, 0, 1]."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat


def _check_rotation(rot: np.ndarray, tol: float) -> None:
    if np.abs(rot @ rot.T - np.eye(3)).max() > tol:
        raise ValueError("rotation is not orthonormal within tolerance")
    det = (
        rot[0, 0] * (rot[1, 1] * rot[2, 2] - rot[1, 2] * rot[2, 1])
        - rot[0, 1] * (rot[1, 0] * rot[2, 2] - rot[1, 2] * rot[2, 0])
        + rot[0, 2] * (rot[1, 0] * rot[2, 1] - rot[1, 1] * rot[2, 0])
    )
    if abs(det - 1.0) > max(tol, 1e-9):
        raise ValueError("rotation determinant is not +1 within tolerance")


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (x, y, z imaginary parts, w scalar part)."""

    x: float
    y: float
    z: float
    w: float

    def norm(self) -> float:
        return math.sqrt(self.x**2 + self.y**2 + self.z**2 + self.w**2)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero quaternion")
        return Quaternion(self.x / n, self.y / n, self.z / n, self.w / n)

    def canonicalized(self) -> "Quaternion":
        """Fix the q/-q sign ambiguity: w >= 0, ties broken by the first
        nonzero imaginary component being positive."""
        if self.w > 0.0:
            return self
        if self.w < 0.0:
            return Quaternion(-self.x, -self.y, -self.z, -self.w)
        for c in (self.x, self.y, self.z):
            if c != 0.0:
                if c < 0.0:
                    return Quaternion(-self.x, -self.y, -self.z, -self.w)
                return self
        return self

    def rotate(self, vec: np.ndarray) -> np.ndarray:
        """Apply the rotation encoded by this quaternion to a 3-vector."""
        v = np.asarray(vec, dtype=float).reshape(3)
        q = np.array([self.x, self.y, self.z])
        t = 2.0 * np.cross(q, v)
        return v + self.w * t + np.cross(q, t)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w])


@dataclass(frozen=True, eq=False)
class Pose:
    """End-effector position plus orientation; orientation is stored canonicalized."""

    position: np.ndarray
    orientation: Quaternion

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", self.orientation.canonicalized())


@dataclass(frozen=True, eq=False)
class AxisAngle:
    """Rotation of ``angle`` radians about the unit vector ``axis``."""

    axis: np.ndarray
    angle: float

    def __post_init__(self) -> None:
        ax = np.asarray(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, "axis", ax)


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product of two 3-vectors."""
    ax, ay, az = float(a[0]), float(a[1]), float(a[2])
    bx, by, bz = float(b[0]), float(b[1]), float(b[2])
    return np.array([ay * bz - by * az, bx * az - ax * bz, ax * by - bx * ay])


def dh_transform(row: DHRow, theta: float) -> Transform:
    """Modified-DH link transform for one row at joint angle ``theta``.

    The row's (a, alpha) belong to the preceding link, d to the current
    one; the rotation about the local z-axis by theta closes the row.
    """
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    rotation = np.array(
        [
            [ct, -st, 0.0],
            [st * ca, ct * ca, -sa],
            [st * sa, ct * sa, ca],
        ]
    )
    translation = np.array([row.a, -sa * row.d, ca * row.d])
    return Transform(rotation, translation)


def _chain_frames(chain: KinematicChain, joints: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Cumulative (rotation, origin) of frames 1..I in the base frame."""
    rots: list[np.ndarray] = []
    origins: list[np.ndarray] = []
    rot = np.eye(3)
    origin = np.zeros(3)
    for row, theta in zip(chain.rows, joints):
        link = dh_transform(row, float(theta))
        origin = rot @ link.translation + origin
        rot = rot @ link.rotation
        rots.append(rot)
        origins.append(origin)
    return rots, origins


def _as_joint_vector(chain: KinematicChain, joints) -> np.ndarray:
    vec = np.asarray(joints, dtype=float).reshape(-1)
    if vec.shape[0] != chain.joint_count:
        raise ValueError(
            f"expected {chain.joint_count} joint angles, got {vec.shape[0]}"
        )
    if not np.all(np.isfinite(vec)):
        raise ValueError("joint angles must be finite")
    return vec


def chain_transform(chain: KinematicChain, joints, i: int) -> Transform:
    """Transform of frame ``i`` (1-based) in the base frame: product of rows 1..i."""
    vec = _as_joint_vector(chain, joints)
    if not 1 <= i <= chain.joint_count:
        raise IndexError(f"frame index {i} out of range 1..{chain.joint_count}")
    rots, origins = _chain_frames(chain, vec[:i])
    return Transform(rots[i - 1], origins[i - 1])


def forward_kinematics(chain: KinematicChain, joints) -> Pose:
    """Pose of the last chain frame (position + canonicalized orientation)."""
    vec = _as_joint_vector(chain, joints)
    rots, origins = _chain_frames(chain, vec)
    return Pose(origins[-1], rotation_to_quaternion(rots[-1]))


def rotation_to_quaternion(rotation: np.ndarray) -> Quaternion:
    """Convert an orthonormal 3x3 matrix to a canonicalized unit quaternion.

    Uses the largest-pivot (Shepperd) branch selection so the division is
    always by a well-conditioned component.
    """
    rot = np.asarray(rotation, dtype=float)
    if rot.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    _check_rotation(rot, ROTATION_INPUT_TOL)

    trace = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if trace >= max(rot[0, 0], rot[1, 1], rot[2, 2]):
        s = math.sqrt(max(trace + 1.0, 0.0)) * 2.0
        w = 0.25 * s
        x = (rot[2, 1] - rot[1, 2]) / s
        y = (rot[0, 2] - rot[2, 0]) / s
        z = (rot[1, 0] - rot[0, 1]) / s
    elif rot[0, 0] >= rot[1, 1] and rot[0, 0] >= rot[2, 2]:
        s = math.sqrt(max(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2], 0.0)) * 2.0
        w = (rot[2, 1] - rot[1, 2]) / s
        x = 0.25 * s
        y = (rot[0, 1] + rot[1, 0]) / s
        z = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] >= rot[2, 2]:
        s = math.sqrt(max(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2], 0.0)) * 2.0
        w = (rot[0, 2] - rot[2, 0]) / s
        x = (rot[0, 1] + rot[1, 0]) / s
        y = 0.25 * s
        z = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = math.sqrt(max(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1], 0.0)) * 2.0
        w = (rot[1, 0] - rot[0, 1]) / s
        x = (rot[0, 2] + rot[2, 0]) / s
        y = (rot[1, 2] + rot[2, 1]) / s
        z = 0.25 * s
    return Quaternion(x, y, z, w).normalized().canonicalized()


def quaternion_from_axis_angle(aa: AxisAngle) -> Quaternion:
    """Quaternion (sin(a/2)*axis, cos(a/2)) for a rotation about a unit axis."""
    ax = aa.axis
    n = math.sqrt(float(ax[0]) ** 2 + float(ax[1]) ** 2 + float(ax[2]) ** 2)
    if abs(n - 1.0) > ROTATION_TOL:
        raise ValueError("axis must be a unit vector")
    half = 0.5 * aa.angle
    s = math.sin(half)
    return Quaternion(s * float(ax[0]), s * float(ax[1]), s * float(ax[2]), math.cos(half))


def geometric_jacobian(chain: KinematicChain, joints) -> np.ndarray:
    """6 x I geometric Jacobian of the last chain frame.

    Column i stacks [axis_i x (p_end - p_i); axis_i] where axis_i is
    joint i's rotation axis (the z-axis of frame i under the modified-DH
    rows used here) and p_i that frame's origin, both in the base frame.
    Rows 0-2 map joint rates to linear end-effector velocity, rows 3-5
    to angular velocity.
    """
    vec = _as_joint_vector(chain, joints)
    rots, origins = _chain_frames(chain, vec)
    p_end = origins[-1]
    jac = np.zeros((6, chain.joint_count))
    for i in range(chain.joint_count):
        axis = rots[i] @ _EZ
        jac[:3, i] = cross(axis, p_end - origins[i])
        jac[3:, i] = axis
    return jac


def planar3_fk(lengths, angles) -> tuple[float, float, float]:
    """Closed-form tip pose (x, y, phi) of a three-link planar arm."""
    l1, l2, l3 = (float(v) for v in lengths)
    t1, t2, t3 = (float(v) for v in angles)
    s1, s12, s123 = t1, t1 + t2, t1 + t2 + t3
    x = l1 * math.cos(s1) + l2 * math.cos(s12) + l3 * math.cos(s123)
    y = l1 * math.sin(s1) + l2 * math.sin(s12) + l3 * math.sin(s123)
    return x, y, s123


def planar3_jacobian(lengths, angles) -> np.ndarray:
    """3x3 Jacobian of planar3_fk: rows are d(x)/d(tau), d(y)/d(tau), d(phi)/d(tau).

    The y-row carries the cosine terms that differentiating the sine
    chain produces; the phi-row is identically (1, 1, 1).
    """
    l1, l2, l3 = (float(v) for v in lengths)
    t1, t2, t3 = (float(v) for v in angles)
    s1, s12, s123 = t1, t1 + t2, t1 + t2 + t3
    sin1, sin12, sin123 = math.sin(s1), math.sin(s12), math.sin(s123)
    cos1, cos12, cos123 = math.cos(s1), math.cos(s12), math.cos(s123)
    return np.array(
        [
            [
                -l1 * sin1 - l2 * sin12 - l3 * sin123,
                -l2 * sin12 - l3 * sin123,
                -l3 * sin123,
            ],
            [
                l1 * cos1 + l2 * cos12 + l3 * cos123,
                l2 * cos12 + l3 * cos123,
                l3 * cos123,
            ],
            [1.0, 1.0, 1.0],
        ]
    )


def pose_error(real: Pose, virtual: Pose, w1: float, w2: float) -> float:
    """Weighted sum of position distance and quaternion-component distance."""
    dp = real.position - virtual.position
    dq = real.orientation.as_array() - virtual.orientation.as_array()
    return w1 * math.sqrt(float(dp @ dp)) + w2 * math.sqrt(float(dq @ dq))


# ---------------------------------------------------------------------------
# Arm models: a uniform (pose, jacobian) surface consumed by the simulator.
# ---------------------------------------------------------------------------


def panda7() -> KinematicChain:
    """Seven-joint chain with the published Franka Emika Panda DH constants."""
    half_pi = math.pi / 2.0
    table = [
        (0.0, 0.333, 0.0),
        (0.0, 0.0, -half_pi),
        (0.0, 0.316, half_pi),
        (0.0825, 0.0, half_pi),
        (-0.0825, 0.384, -half_pi),
        (0.0, 0.0, half_pi),
        (0.088, 0.0, half_pi),
    ]
    rows = tuple(
        DHRow(a=a, d=d, alpha=alpha, joint_index=i + 1)
        for i, (a, d, alpha) in enumerate(table)
    )
    return KinematicChain(rows)


class ChainArm:
    """Arm model backed by a DH chain: 6 x I Jacobian, full 3D pose."""

    def __init__(self, chain: KinematicChain):
        self.chain = chain

    @property
    def joint_count(self) -> int:
        return self.chain.joint_count

    def pose(self, angles) -> Pose:
        return forward_kinematics(self.chain, angles)

    def jacobian(self, angles) -> np.ndarray:
        return geometric_jacobian(self.chain, angles)


class PlanarArm:
    """Three-link planar arm model: 3x3 Jacobian, pose embedded in 3D.

    The planar tip (x, y) sits in the z=0 plane and the tip heading phi
    becomes a rotation about the z-axis, so the same pose-error metric
    applies as for spatial chains.
    """

    def __init__(self, lengths):
        vals = tuple(float(v) for v in lengths)
        if len(vals) != 3:
            raise ValueError("a planar arm takes exactly three link lengths")
        if any(v <= 0.0 for v in vals):
            raise ValueError("link lengths must be positive")
        self.lengths = vals

    @property
    def joint_count(self) -> int:
        return 3

    def pose(self, angles) -> Pose:
        x, y, phi = planar3_fk(self.lengths, angles)
        half = 0.5 * phi
        quat = Quaternion(0.0, 0.0, math.sin(half), math.cos(half))
        return Pose(np.array([x, y, 0.0]), quat)

    def jacobian(self, angles) -> np.ndarray:
        return planar3_jacobian(self.lengths, angles)
