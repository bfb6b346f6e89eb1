"""Rotation and rigid/scaled transform primitives.

Conventions used throughout the engine:

* Euler angles are XYZ order with the X rotation applied first in the local
  frame, i.e. ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.  The x-axis is the bone/twist
  axis, so twist is the innermost rotation.
* A ``Transform3`` acts on points as ``p -> R @ (s * p) + t`` with a single
  uniform scale ``s > 0``.  This is exactly the upper 3x4 block of the
  homogeneous matrix ``[[s*R, t], [0, 1]]``.
* The 6D rotation encoding is the first two columns of the rotation matrix,
  column-major: ``(R00, R10, R20, R01, R11, R21)``.

All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericError


@dataclass(frozen=True)
class EulerXYZ:
    """XYZ Euler angles in radians. No range restriction."""

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz], dtype=np.float64)


def _rx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _ry(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def _rz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def euler_to_matrix(e: EulerXYZ) -> np.ndarray:
    """Rotation matrix for XYZ Euler angles, X applied first."""
    return _rz(e.rz) @ _ry(e.ry) @ _rx(e.rx)


def matrix_to_euler(R: np.ndarray) -> EulerXYZ:
    """Inverse of :func:`euler_to_matrix` (principal branch).

    Near gimbal lock (|ry| = pi/2) the rx/rz split is not unique; rx is set
    to zero there.
    """
    R = np.asarray(R, dtype=np.float64)
    sy = -R[2, 0]
    cy = np.hypot(R[0, 0], R[1, 0])
    ry = np.arctan2(sy, cy)
    if cy > 1e-12:
        rx = np.arctan2(R[2, 1], R[2, 2])
        rz = np.arctan2(R[1, 0], R[0, 0])
    else:
        rx = 0.0
        rz = np.arctan2(-R[0, 1], R[1, 1])
    return EulerXYZ(float(rx), float(ry), float(rz))


@dataclass(frozen=True)
class Transform3:
    """Rotation + translation + uniform scale, acting as ``R (s p) + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return (self.scale * p) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Transform3":
        inv_s = 1.0 / self.scale
        rt = self.rotation.T
        return Transform3(rt, -inv_s * (rt @ self.translation), inv_s)


IDENTITY = Transform3()


def compose(a: Transform3, b: Transform3) -> Transform3:
    """Transform equal to applying ``b`` first, then ``a``.

    Matches the 4x4 homogeneous product ``a.matrix() @ b.matrix()`` refactored
    back into (rotation, translation, scale).
    """
    return Transform3(
        rotation=a.rotation @ b.rotation,
        translation=a.scale * (a.rotation @ b.translation) + a.translation,
        scale=a.scale * b.scale,
    )


def translation(t) -> Transform3:
    return Transform3(translation=np.asarray(t, dtype=np.float64))


def rotation(e: EulerXYZ) -> Transform3:
    return Transform3(rotation=euler_to_matrix(e))


def scaling(s: float) -> Transform3:
    return Transform3(scale=float(s))


def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, column-major, as a 6-vector."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[:, 0], R[:, 1]])


def sixd_to_rotation(r: np.ndarray) -> np.ndarray:
    """Recover a rotation matrix from a 6D encoding via Gram-Schmidt.

    Raises NumericError when the two column vectors are (near) zero or
    parallel.
    """
    r = np.asarray(r, dtype=np.float64)
    a, b = r[:3], r[3:6]
    na = np.linalg.norm(a)
    if na < 1e-12:
        raise NumericError("6d_to_rotation: first column is degenerate (zero norm)")
    c0 = a / na
    b_perp = b - (c0 @ b) * c0
    nb = np.linalg.norm(b_perp)
    if nb < 1e-12:
        raise NumericError("6d_to_rotation: columns are parallel or second is zero")
    c1 = b_perp / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=1)


# --- batched torch kernels (float64), used by the differentiable pipeline ---


def euler_to_matrix_batch(angles: torch.Tensor) -> torch.Tensor:
    """XYZ Euler angles (..., 3) to rotation matrices (..., 3, 3)."""
    rx, ry, rz = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx = torch.cos(rx), torch.sin(rx)
    cy, sy = torch.cos(ry), torch.sin(ry)
    cz, sz = torch.cos(rz), torch.sin(rz)
    # Rows of Rz @ Ry @ Rx, expanded symbolically.
    r00 = cz * cy
    r01 = cz * sy * sx - sz * cx
    r02 = cz * sy * cx + sz * sx
    r10 = sz * cy
    r11 = sz * sy * sx + cz * cx
    r12 = sz * sy * cx - cz * sx
    r20 = -sy
    r21 = cy * sx
    r22 = cy * cx
    rows = torch.stack(
        [
            torch.stack([r00, r01, r02], dim=-1),
            torch.stack([r10, r11, r12], dim=-1),
            torch.stack([r20, r21, r22], dim=-1),
        ],
        dim=-2,
    )
    return rows


def rotation_to_6d_batch(R: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) to 6D encodings (..., 6)."""
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)
