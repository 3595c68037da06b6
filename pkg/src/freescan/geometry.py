"""Rigid-body transform algebra for freehand ultrasound.

Conventions
-----------
``T_{j<-i}`` maps coordinates expressed in frame ``i`` to frame ``j``; composing
``compose(a, b)`` applies ``b`` first. Points are homogeneous ``(N, 4)`` arrays
with ``w = 1``. A 6-DoF pose vector is ``(rx, ry, rz, tx, ty, tz)``: Euler
angles in radians for the intrinsic Z-Y-X sequence, i.e. ``R = Rz @ Ry @ Rx``,
followed by a translation in mm.

All numpy-side geometry is float64. The torch helpers at the bottom of the
module mirror ``pose_to_transform`` so losses can back-propagate through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

ORTHO_TOL = 1e-6
GIMBAL_TOL = 1e-6


class GimbalLockError(ValueError):
    """Raised when a rotation is too close to pitch = +-pi/2 to recover Euler angles."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A rotation (3x3, orthonormal, det +1) plus a translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        if orthonormality_error(r) > ORTHO_TOL or _det3(r) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        self._freeze(r, t)

    def _freeze(self, r, t):
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _trusted(cls, r: np.ndarray, t: np.ndarray) -> "RigidTransform":
        """Skip validation for results that are proper rotations by construction."""
        out = object.__new__(cls)
        out._freeze(r, t)
        return out

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("bottom row of a rigid transform must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return NotImplemented

    def inverse(self) -> "RigidTransform":
        return inverse(self)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.as_matrix(), other.as_matrix(), rtol=0.0, atol=atol))

    def __repr__(self):
        return f"RigidTransform(pose={np.array2string(transform_to_pose(self, check=False), precision=4)})"


def _det3(r: np.ndarray) -> float:
    (a, b, c), (d, e, f), (g, h, i) = r.tolist()
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


_EYE3 = np.eye(3)


def orthonormality_error(r: np.ndarray) -> float:
    return float(np.abs(r.T @ r - _EYE3).max())


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(r)
    q = u @ vt
    if np.linalg.det(q) < 0:
        u[:, -1] *= -1
        q = u @ vt
    return q


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    r = a.rotation @ b.rotation
    # long chains drift; snap back before the error becomes visible at 1e-9
    if orthonormality_error(r) > 1e-12:
        r = orthonormalize(r)
    return RigidTransform._trusted(r, a.rotation @ b.translation + a.translation)


def compose_all(transforms: Iterable[RigidTransform]) -> RigidTransform:
    """``compose_all([a, b, c]) == a @ b @ c``."""
    out = RigidTransform.identity()
    for t in transforms:
        out = compose(out, t)
    return out


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T.copy()
    return RigidTransform._trusted(rt, -rt @ t.translation)


def ground_truth_relative(world_from_i: RigidTransform, world_from_j: RigidTransform) -> RigidTransform:
    """Tracker-derived ``T_{j<-i} = (T_{world<-j})^-1 . T_{world<-i}``."""
    return compose(inverse(world_from_j), world_from_i)


def apply(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    pts = _homogeneous(pts)
    out = np.empty_like(pts)
    out[:, :3] = pts[:, :3] @ t.rotation.T + t.translation
    out[:, 3] = 1.0
    return out


def _homogeneous(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError(f"expected (N, 3) or (N, 4) points, got {pts.shape}")
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.ones((len(pts), 1))])
    return pts


def corner_points(width_px: int, height_px: int, spacing: float) -> np.ndarray:
    """The four image corners in image space (mm), on the plane z = 0.

    Order: (0, 0), (W-1, 0), (0, H-1), (W-1, H-1) in pixel units.
    """
    if width_px < 2 or height_px < 2:
        raise ValueError("frame must be at least 2x2 pixels")
    if not spacing > 0:
        raise ValueError("pixel spacing must be positive")
    x = (width_px - 1) * spacing
    y = (height_px - 1) * spacing
    return np.array(
        [[0.0, 0.0, 0.0, 1.0], [x, 0.0, 0.0, 1.0], [0.0, y, 0.0, 1.0], [x, y, 0.0, 1.0]]
    )


def pixel_grid(width_px: int, height_px: int, spacing: float, stride: int = 1) -> np.ndarray:
    """Homogeneous image-space positions of every ``stride``-th pixel."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    u = np.arange(0, width_px, stride) * spacing
    v = np.arange(0, height_px, stride) * spacing
    uu, vv = np.meshgrid(u, v)
    n = uu.size
    return np.column_stack([uu.ravel(), vv.ravel(), np.zeros(n), np.ones(n)])


# -- 6-DoF parameterization ---------------------------------------------------


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(euler) -> np.ndarray:
    rx, ry, rz = np.asarray(euler, dtype=np.float64)
    return _rot_z(rz) @ _rot_y(ry) @ _rot_x(rx)


def pose_to_transform(pose) -> RigidTransform:
    pose = np.asarray(pose, dtype=np.float64).reshape(6)
    return RigidTransform(euler_to_rotation(pose[:3]), pose[3:])


def transform_to_pose(t: RigidTransform, check: bool = True) -> np.ndarray:
    """Inverse of :func:`pose_to_transform` away from gimbal lock."""
    r = t.rotation
    sy = -r[2, 0]
    cy = np.hypot(r[0, 0], r[1, 0])
    if check and cy < GIMBAL_TOL:
        raise GimbalLockError("pitch within 1e-6 rad of +-pi/2; Euler angles are not unique")
    ry = np.arctan2(sy, cy)
    rx = np.arctan2(r[2, 1], r[2, 2])
    rz = np.arctan2(r[1, 0], r[0, 0])
    return np.concatenate([[rx, ry, rz], t.translation])


def rotation_about(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def random_transform(rng: np.random.Generator, max_angle: float = np.pi, max_translation: float = 100.0) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_angle, max_angle)
    return RigidTransform(rotation_about(axis, angle), rng.uniform(-max_translation, max_translation, 3))


def stack_matrices(transforms: Iterable[RigidTransform]) -> np.ndarray:
    """``(K, 4, 4)`` float64 array from a sequence of transforms."""
    mats = [t.as_matrix() for t in transforms]
    if not mats:
        return np.zeros((0, 4, 4))
    return np.stack(mats)


def as_matrices(chain) -> np.ndarray:
    """Accept a list of RigidTransform or an array of 4x4 matrices."""
    if isinstance(chain, np.ndarray):
        arr = np.asarray(chain, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[-2:] != (4, 4):
            raise ValueError(f"expected (..., 4, 4) matrices, got {arr.shape}")
        return arr
    if isinstance(chain, RigidTransform):
        return chain.as_matrix()[None]
    return stack_matrices(chain)


def invert_matrices(m: np.ndarray) -> np.ndarray:
    """Closed-form inverse of stacked rigid 4x4 matrices."""
    out = np.zeros_like(m)
    rt = np.swapaxes(m[..., :3, :3], -1, -2)
    out[..., :3, :3] = rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", rt, m[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


# -- differentiable (torch) mirror --------------------------------------------


def pose_to_matrix_torch(pose: torch.Tensor) -> torch.Tensor:
    """``(..., 6)`` pose vectors to ``(..., 4, 4)`` homogeneous matrices."""
    rx, ry, rz = pose[..., 0], pose[..., 1], pose[..., 2]
    cx, sx = torch.cos(rx), torch.sin(rx)
    cy, sy = torch.cos(ry), torch.sin(ry)
    cz, sz = torch.cos(rz), torch.sin(rz)
    zero = torch.zeros_like(rx)
    one = torch.ones_like(rx)
    # Rz @ Ry @ Rx expanded
    rows = [
        cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx, pose[..., 3],
        sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx, pose[..., 4],
        -sy, cy * sx, cy * cx, pose[..., 5],
        zero, zero, zero, one,
    ]
    return torch.stack(rows, dim=-1).reshape(*pose.shape[:-1], 4, 4)
