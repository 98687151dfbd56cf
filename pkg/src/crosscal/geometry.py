"""SE(3)/SO(3) arithmetic, Euler conversions and the pinhole projection.

Rigid transforms are stored as an explicit rotation matrix plus translation
vector; that is the one canonical representation used across the whole
toolkit. Euler angles only appear at the file-format boundary (intrinsic
XYZ, degrees).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NearPiRotation, NonPositiveDepth

_EPS = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > 1e-8 or np.linalg.det(r) < 0:
            raise ValueError(f"rotation not orthonormal (err={err:.2e}, det={np.linalg.det(r):.4f})")
        r.setflags(write=False)
        t.setflags(write=False)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or an array of points (N, 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; fx/fy in pixels, principal point (cx, cy)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a*b: applies b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def transform_point(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    return t.apply(p)


def project(k: Intrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of one camera-frame point to pixels."""
    x, y, z = np.asarray(p_cam, dtype=float).reshape(3)
    if z <= _EPS:
        raise NonPositiveDepth(f"depth {z:.3e} <= {_EPS}")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def project_many(k: Intrinsics, pts: np.ndarray) -> np.ndarray:
    """Vectorized projection; raises if any depth is non-positive."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    if np.any(z <= _EPS):
        raise NonPositiveDepth("at least one point at non-positive depth")
    return np.stack([k.fx * pts[:, 0] / z + k.cx, k.fy * pts[:, 1] / z + k.cy], axis=1)


class EulerXYZ(NamedTuple):
    rx: float
    ry: float
    rz: float
    gimbal_lock: bool = False


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def rotation_from_euler_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    """Intrinsic XYZ Euler angles (degrees) to rotation matrix."""
    a, b, c = np.deg2rad([rx, ry, rz])
    return rot_x(a) @ rot_y(b) @ rot_z(c)


def euler_xyz_from_rotation(r: np.ndarray) -> EulerXYZ:
    """Rotation matrix to intrinsic XYZ Euler angles in degrees.

    Near gimbal lock (|cos(ry)| < 1e-9) rz is fixed to 0 and the
    gimbal_lock flag is set.
    """
    r = np.asarray(r, dtype=float)
    sy = np.clip(r[0, 2], -1.0, 1.0)
    cy = np.hypot(r[0, 0], r[0, 1])
    ry = np.arctan2(sy, cy)
    if cy < _EPS:
        # r[2,1] = sa, r[1,1] = ca when rz = 0
        rx = np.arctan2(r[2, 1], r[1, 1])
        return EulerXYZ(np.rad2deg(rx), np.rad2deg(ry), 0.0, True)
    rx = np.arctan2(-r[1, 2], r[2, 2])
    rz = np.arctan2(-r[0, 1], r[0, 0])
    return EulerXYZ(np.rad2deg(rx), np.rad2deg(ry), np.rad2deg(rz), False)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=float)


def rotation_exp(w: np.ndarray) -> np.ndarray:
    """SO(3) exponential (Rodrigues) of an axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < 1e-10:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def rotation_log(r: np.ndarray) -> np.ndarray:
    """SO(3) log; returns the axis-angle vector with angle in [0, pi)."""
    r = np.asarray(r, dtype=float)
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta >= np.pi - 1e-6:
        raise NearPiRotation(f"rotation angle {theta:.9f} too close to pi")
    if theta < 1e-10:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return theta / (2.0 * np.sin(theta)) * np.array(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
    )


def exp_se3(xi: np.ndarray) -> RigidTransform:
    """SE(3) exponential of a 6-vector (v, w): translation part first."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    k = skew(w)
    r = rotation_exp(w)
    if theta < 1e-8:
        jac = np.eye(3) + 0.5 * k + (k @ k) / 6.0
    else:
        jac = (
            np.eye(3)
            + (1.0 - np.cos(theta)) / theta**2 * k
            + (theta - np.sin(theta)) / theta**3 * (k @ k)
        )
    return RigidTransform(r, jac @ v)


def log_se3(t: RigidTransform) -> np.ndarray:
    """Inverse of exp_se3; raises NearPiRotation at angle >= pi - 1e-6."""
    w = rotation_log(t.rotation)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < 1e-8:
        jinv = np.eye(3) - 0.5 * k + (k @ k) / 12.0
    else:
        a = 1.0 / theta**2 * (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta))))
        jinv = np.eye(3) - 0.5 * k + a * (k @ k)
    return np.concatenate([jinv @ t.translation, w])


def rotation_angle(r: np.ndarray) -> float:
    """Angle in radians of a rotation matrix.

    atan2 of (sin, cos) instead of arccos of the trace: arccos loses half the
    significant digits near 0, which matters when checking loop closures.
    """
    r = np.asarray(r)
    s = 0.5 * np.linalg.norm(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
    )
    c = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(s, c))


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD; fixes small drift."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt
