"""Rigid-body math: quaternions, SE(3) poses, dual quaternions, and
weighted dual-quaternion blending (DQB).

Scalar value types (`Quaternion`, `SE3Pose`, `DualQuaternion`) carry the
public contracts; the `quat_*` / `dq_*` array helpers are vectorized twins
used by the hot paths and must stay numerically interchangeable with the
scalar ops (covered by tests).

Conventions: quaternions are scalar-first (w, x, y, z); poses map points as
x' = R x + t; dual quaternions store translation as dual = 0.5 * t_quat * real.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Quaternion:
    """Rotation quaternion, scalar-first."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("rotation axis must be nonzero")
        axis = axis / n
        half = 0.5 * angle
        s = np.sin(half)
        return Quaternion(float(np.cos(half)), *(s * axis))

    @staticmethod
    def from_array(q) -> "Quaternion":
        w, x, y, z = (float(v) for v in q)
        return Quaternion(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def norm(self) -> float:
        return float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def dot(self, other: "Quaternion") -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        # Hamilton product.
        a, b = self, other
        return Quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def rotate(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        p = Quaternion(0.0, *v)
        r = self * p * self.conjugate()
        return np.array([r.x, r.y, r.z])

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array()[None, :])[0]


@dataclass
class SE3Pose:
    """Rigid transform: rotation (unit quaternion) followed by translation."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose()

    @staticmethod
    def from_translation(x, y=None, z=None) -> "SE3Pose":
        t = np.array([x, y, z], dtype=float) if y is not None else np.asarray(x, dtype=float)
        return SE3Pose(Quaternion.identity(), t)

    def apply_point(self, p) -> np.ndarray:
        return self.rotation.rotate(p) + self.translation

    def inverse(self) -> "SE3Pose":
        rinv = self.rotation.conjugate()
        return SE3Pose(rinv, -rinv.rotate(self.translation))

    def copy(self) -> "SE3Pose":
        return SE3Pose(self.rotation, self.translation.copy())


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Composite pose applying b first, then a."""
    return SE3Pose(a.rotation * b.rotation, a.rotation.rotate(b.translation) + a.translation)


@dataclass
class DualQuaternion:
    """Dual quaternion; valid when real is unit and real . dual = 0 (Plucker)."""

    real: Quaternion
    dual: Quaternion

    @staticmethod
    def from_pose(pose: SE3Pose) -> "DualQuaternion":
        r = pose.rotation
        t = Quaternion(0.0, *pose.translation)
        half = t * r
        return DualQuaternion(r, Quaternion(0.5 * half.w, 0.5 * half.x, 0.5 * half.y, 0.5 * half.z))

    def to_pose(self) -> SE3Pose:
        d2 = Quaternion(2 * self.dual.w, 2 * self.dual.x, 2 * self.dual.y, 2 * self.dual.z)
        t = d2 * self.real.conjugate()
        return SE3Pose(self.real, np.array([t.x, t.y, t.z]))

    def normalized(self) -> "DualQuaternion":
        n = self.real.norm()
        if n == 0.0:
            raise ValueError("degenerate dual quaternion: zero real part")
        real = Quaternion(self.real.w / n, self.real.x / n, self.real.y / n, self.real.z / n)
        dual = Quaternion(self.dual.w / n, self.dual.x / n, self.dual.y / n, self.dual.z / n)
        # Project out the component violating the Plucker condition real.dual = 0.
        s = real.dot(dual)
        dual = Quaternion(dual.w - s * real.w, dual.x - s * real.x, dual.y - s * real.y, dual.z - s * real.z)
        return DualQuaternion(real, dual)

    def plucker_error(self) -> float:
        return abs(self.real.dot(self.dual))


def dqb(weights, transforms) -> SE3Pose:
    """Dual-quaternion blend of rigid transforms.

    Sign alignment is to the first element of the list (dual quaternions
    double-cover SE(3); a fixed pivot keeps the blend deterministic). The
    blended dual quaternion is renormalized before conversion back.
    """
    transforms = list(transforms)
    weights = np.asarray(list(weights), dtype=float)
    if len(transforms) == 0:
        raise ValueError("dqb: empty transform list")
    if len(weights) != len(transforms):
        raise ValueError("dqb: weights and transforms must have equal length")
    if np.any(weights < 0):
        raise ValueError("dqb: weights must be nonnegative")
    if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"dqb: weights sum to {weights.sum()!r}, expected 1")

    dqs = [DualQuaternion.from_pose(p) for p in transforms]
    pivot = dqs[0].real
    acc = np.zeros(8)
    for w, dq in zip(weights, dqs):
        v = np.concatenate([dq.real.as_array(), dq.dual.as_array()])
        if dq.real.dot(pivot) < 0.0:
            v = -v
        acc += w * v
    blended = DualQuaternion(Quaternion.from_array(acc[:4]), Quaternion.from_array(acc[4:]))
    return blended.normalized().to_pose()


# ---------------------------------------------------------------------------
# Vectorized twins. Quaternion arrays are (..., 4) scalar-first; translations
# (..., 3). These back the per-Gaussian warp and the scaffold hot paths.
# ---------------------------------------------------------------------------


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a 3x3 rotation matrix (Shepperd)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def pose_to_dq(quat: np.ndarray, trans: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(real, dual) arrays for poses given as (..., 4) quats and (..., 3) translations."""
    tq = np.zeros(quat.shape[:-1] + (4,))
    tq[..., 1:] = trans
    dual = 0.5 * quat_mul(tq, quat)
    return quat.copy(), dual


def dq_to_pose(real: np.ndarray, dual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = quat_mul(2.0 * dual, quat_conj(real))
    return real, t[..., 1:]


def relative_pose(quat_to, trans_to, quat_from, trans_from) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Q_to . Q_from^-1 for arrays of poses."""
    inv_q = quat_conj(quat_from)
    inv_t = -quat_rotate(inv_q, trans_from)
    q = quat_mul(quat_to, inv_q)
    t = quat_rotate(quat_to, inv_t) + trans_to
    return q, t


def dqb_batch(weights: np.ndarray, real: np.ndarray, dual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blend (N, K) weights over (N, K, 4) dual-quaternion parts.

    Returns (quat (N, 4), trans (N, 3)). Sign alignment pivots on element 0
    of each row, matching the scalar `dqb`.
    """
    sign = np.where(np.sum(real * real[:, :1, :], axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    w = weights[..., None]
    br = np.sum(w * sign * real, axis=1)
    bd = np.sum(w * sign * dual, axis=1)
    n = np.linalg.norm(br, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("dqb_batch: degenerate blend with zero real part")
    br = br / n
    bd = bd / n
    bd = bd - np.sum(br * bd, axis=-1, keepdims=True) * br
    return dq_to_pose(br, bd)
