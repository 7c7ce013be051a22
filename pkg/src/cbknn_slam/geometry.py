"""Geometry primitives: isotropic Gaussians, rigid poses, the pinhole camera.

Poses are camera-to-world transforms.  A world point ``X`` maps into the
camera frame as ``R.T @ (X - t)``.  Tangent vectors are ordered
``(vx, vy, vz, wx, wy, wz)``: translation first, then rotation, and a
tangent perturbation ``xi`` of pose ``E`` means ``E @ exp(xi)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, InvalidDepth

DEFAULT_NEAR = 0.01
DEFAULT_FAR = 100.0


@dataclass(frozen=True, eq=False)
class Gaussian:
    """One isotropic splat with a view-independent color."""

    id: int
    mu: np.ndarray
    opacity: float
    radius: float
    color: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(3)
        color = np.asarray(self.color, dtype=float).reshape(3)
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {self.opacity}")
        if not self.radius > 0.0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if np.any(color < 0.0) or np.any(color > 1.0):
            raise ValueError(f"color channels must lie in [0, 1], got {color}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "color", color)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * W @ W


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls(np.eye(3), np.array([x, y, z], dtype=float))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(so3_exp(rotvec), np.asarray(translation, dtype=float))

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "Pose":
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "Pose":
        """Camera at ``eye`` with its +z axis toward ``target``; image y follows ``-up``."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(np.asarray(up, dtype=float), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose":
        xi = np.asarray(xi, dtype=float)
        v, w = xi[:3], xi[3:]
        return cls(so3_exp(w), _left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        w = so3_log(self.rotation)
        v = np.linalg.solve(_left_jacobian(w), self.translation)
        return np.concatenate([v, w])

    def quaternion(self) -> np.ndarray:
        """Rotation as (qx, qy, qz, qw)."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def retract(self, xi: np.ndarray) -> "Pose":
        """Right perturbation ``self @ exp(xi)``."""
        return self.compose(Pose.exp(xi))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points from this pose's local frame into the parent frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points into the camera frame (inverse of :meth:`apply`)."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(so3_log(self.rotation)))

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.all(np.abs(R.T @ R - np.eye(3)) <= tol) and np.linalg.det(R) > 0)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
                    and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol))

    def __repr__(self):
        t = np.array2string(self.translation, precision=4)
        r = np.array2string(so3_log(self.rotation), precision=4)
        return f"Pose(t={t}, rotvec={r})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def predict_pose(e_prev: Pose, e_curr: Pose) -> Pose:
    """Constant-velocity prediction: replay the last relative motion once more."""
    return e_curr.compose(e_prev.inverse().compose(e_curr))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation distance (m) and rotation angle (rad) of ``a^-1 b``."""
    rel = a.inverse().compose(b)
    return float(np.linalg.norm(rel.translation)), rel.rotation_angle()


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "PinholeCamera":
        """Intrinsics for an image resized by ``factor`` (pixel centers preserved)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return PinholeCamera(self.fx * factor, self.fy * factor,
                             (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5,
                             w, h, self.near, self.far)


@dataclass(eq=False)
class RgbdFrame:
    """Color in [0, 1] (H, W, 3) and metric depth (H, W) with 0 marking invalid."""

    color: np.ndarray
    depth: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        if self.color.shape != self.depth.shape + (3,):
            raise ValueError(f"color {self.color.shape} and depth {self.depth.shape} disagree")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def project_points(points: np.ndarray, pose: Pose, cam: PinholeCamera):
    """Vectorized projection. Returns (pixels (N, 2), camera-frame points (N, 3)).

    Pixels are only meaningful where the camera-frame z is positive.
    """
    pc = pose.to_camera(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1), pc


def project(mu, pose: Pose, cam: PinholeCamera) -> tuple[np.ndarray, float]:
    """Pixel coordinates and camera depth of one world point."""
    px, pc = project_points(np.asarray(mu, dtype=float)[None], pose, cam)
    z = pc[0, 2]
    if not z > 0:
        raise BehindCamera(f"point at camera depth {z:.6g}")
    return px[0], float(z)


def backproject(pixel, depth: float, pose: Pose, cam: PinholeCamera) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    u, v = pixel
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return pose.apply(pc)


def pixel_grid(cam: PinholeCamera) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel-center coordinate rasters (u, v), each (H, W)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    return u.astype(float), v.astype(float)


def backproject_depth(depth: np.ndarray, pose: Pose, cam: PinholeCamera,
                      stride: int = 1, mask: np.ndarray | None = None):
    """World points for valid pixels on a strided lattice.

    Returns ``(points (N, 3), rows (N,), cols (N,))``.
    """
    valid = depth > 0
    if mask is not None:
        valid &= mask
    lattice = np.zeros_like(valid)
    lattice[::stride, ::stride] = True
    rows, cols = np.nonzero(valid & lattice)
    d = depth[rows, cols]
    pc = np.stack([(cols - cam.cx) / cam.fx * d, (rows - cam.cy) / cam.fy * d, d], axis=1)
    return pose.apply(pc), rows, cols
