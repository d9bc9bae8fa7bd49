"""Pinhole cameras and rigid camera-to-camera poses.

Conventions: the camera looks down +z, pixel ``u`` grows rightward and ``v``
downward, and pixel centres sit on integer coordinates.  A :class:`Pose` maps
source-camera coordinates to target-camera coordinates, ``p' = R p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import BehindCameraError, ConfigurationError, InvalidDepthError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ConfigurationError("image size must be integral")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def default(cls, width: int, height: int | None = None, focal: float | None = None) -> Intrinsics:
        """Square-pixel camera with the principal point at the image centre."""
        height = width if height is None else height
        focal = float(width) if focal is None else float(focal)
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ConfigurationError(f"pose needs a 3x3 rotation and 3-vector translation, got {r.shape}, {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ConfigurationError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ConfigurationError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ConfigurationError(f"expected a 4x4 homogeneous matrix, got shape {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ConfigurationError("homogeneous matrix bottom row must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, x, y, z):
        """Transform coordinates (scalars or equally shaped arrays).

        Written out term by term so scalar and vectorised callers round identically.
        """
        r, t = self.rotation, self.translation
        xn = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
        yn = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
        zn = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
        return xn, yn, zn

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def unproject(u: float, v: float, d: float, k: Intrinsics) -> Point3:
    if not (math.isfinite(d) and d > 0):
        raise InvalidDepthError(f"depth must be finite and positive, got {d}")
    return Point3((u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d)


def project(p: Point3, k: Intrinsics) -> tuple[float, float, float]:
    x, y, z = p
    if not z > 0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def pose_inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -(rt @ p.translation))


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rotation_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` from per-axis angles in radians."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rot_z @ rot_y @ rot_x
