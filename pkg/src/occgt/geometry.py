"""Rigid SE(3) poses stored as a unit quaternion (w, x, y, z) plus translation.

Quaternions are scalar-first and rotations are active: ``pose.apply(p)``
returns ``R @ p + t``. ``a @ b`` composes so that ``b`` is applied first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Inputs further than this from unit norm are treated as corrupt, not renormalized.
QUAT_NORM_TOLERANCE = 1e-3


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``p -> R(rotation) @ p + translation``.

    Args:
        rotation: quaternion (w, x, y, z); renormalized on construction.
        translation: 3-vector in meters.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=np.float64).reshape(-1)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if q.shape != (4,) or t.shape != (3,):
            raise ValidationError(f"pose needs a 4-quaternion and 3-translation, got {q.shape} and {t.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValidationError("pose contains non-finite values")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_NORM_TOLERANCE:
            raise ValidationError(f"quaternion norm {norm:.6g} deviates from 1 by more than {QUAT_NORM_TOLERANCE}")
        q = q / norm
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> PoseSE3:
        return cls(translation=np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> PoseSE3:
        """Rotation of ``yaw`` radians about +Z followed by ``translation``."""
        half = 0.5 * yaw
        return cls(np.array([np.cos(half), 0.0, 0.0, np.sin(half)]), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> PoseSE3:
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def compose(self, other: PoseSE3) -> PoseSE3:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = _quat_mul(self.rotation, other.rotation)
        t = self.rotation_matrix @ other.translation + self.translation
        return PoseSE3(q, t)

    __matmul__ = compose

    def inverse(self) -> PoseSE3:
        w, x, y, z = self.rotation
        q_inv = np.array([w, -x, -y, -z])
        t_inv = -(quat_to_matrix(q_inv) @ self.translation)
        return PoseSE3(q_inv, t_inv)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix.T + self.translation

    def to_dict(self) -> dict:
        return {"t": self.translation.tolist(), "q": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> PoseSE3:
        return cls(np.asarray(d["q"], dtype=np.float64), np.asarray(d["t"], dtype=np.float64))

    def allclose(self, other: PoseSE3, atol: float = 1e-9) -> bool:
        """Equality up to ``atol``, treating q and -q as the same rotation."""
        return bool(
            np.allclose(self.rotation_matrix, other.rotation_matrix, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose applying ``b`` then ``a``."""
    return a.compose(b)


def invert(p: PoseSE3) -> PoseSE3:
    return p.inverse()


def transform_points(p: PoseSE3, pts: np.ndarray) -> np.ndarray:
    """Apply ``p`` to each row of ``pts``; order and length preserved."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size and not np.all(np.isfinite(pts)):
        raise ValidationError("points contain non-finite coordinates")
    return p.apply(pts.reshape(-1, 3)).reshape(pts.shape)
