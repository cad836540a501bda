"""Cameras, quaternions and Gaussian containers shared by every stage.

Conventions used throughout the package:

* Images are ``(H, W, C)`` float64 arrays, row-major, colors in ``[0, 1]``.
* Pixel ``(i, j)`` (column ``i``, row ``j``) has its center at the continuous
  coordinate ``(i + 0.5, j + 0.5)``.
* ``Camera.R`` / ``Camera.t`` map world points into the camera frame:
  ``p_cam = R @ p_world + t``.
* Quaternions are stored as ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

BEHIND_CAMERA_EPS = 1e-8


class BehindCameraError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 14 or self.height < 14:
            raise ValueError(f"image must be at least 14x14, got {self.width}x{self.height}")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation (orthonormal, det=+1)")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def replace(self, **changes) -> "Camera":
        return replace(self, **changes)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Build a camera at ``eye`` looking toward ``target`` (x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-12:
            raise DegenerateError("up vector is parallel to the viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fy, width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy,
                   R, -R @ eye, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["t"], dtype=np.float64), int(d["width"]), int(d["height"]))


def to_camera_frame(cam: Camera, p_world) -> np.ndarray:
    return np.asarray(p_world, dtype=np.float64) @ cam.R.T + cam.t


def to_world_frame(cam: Camera, p_cam) -> np.ndarray:
    return (np.asarray(p_cam, dtype=np.float64) - cam.t) @ cam.R


def project(cam: Camera, p_world):
    """Project world point(s) to pixel coordinates.

    Accepts a single 3-vector or an ``(N, 3)`` array and returns ``(u, v, depth)``
    with matching shape. Raises :class:`BehindCameraError` if any point has
    camera-frame ``z <= 1e-8``.
    """
    pc = to_camera_frame(cam, p_world)
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    if np.any(z <= BEHIND_CAMERA_EPS):
        raise BehindCameraError("point is behind the camera")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def unproject(cam: Camera, u, v, depth) -> np.ndarray:
    """Lift pixel coordinate(s) at the given depth(s) to world point(s)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise InvalidDepthError("depth must be positive")
    pc = np.stack(np.broadcast_arrays((u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d), axis=-1)
    return to_world_frame(cam, pc)


def pixel_centers(width: int, height: int):
    """Continuous coordinates of every pixel center, as ``(x, y)`` grids of shape (H, W)."""
    return np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)


# -- quaternions ---------------------------------------------------------------

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateError("zero-norm quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of (possibly unnormalized) quaternion(s) ``(..., 4)``."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_to_matrix_backward(q, grad_M) -> np.ndarray:
    """Gradient wrt a *unit* quaternion ``(N, 4)`` given gradient wrt its matrix ``(N, 3, 3)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = grad_M
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], -1)


def normalize_backward(v, grad_unit) -> np.ndarray:
    """Gradient through ``v / |v|`` along the last axis."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (grad_unit - u * np.sum(u * grad_unit, axis=-1, keepdims=True)) / n


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix."""
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
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_left_matrix(p) -> np.ndarray:
    """4x4 matrix ``L`` with ``L @ q == p ⊗ q`` (Hamilton product)."""
    w, x, y, z = p
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def quat_multiply(p, q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) @ quat_left_matrix(np.asarray(p, dtype=np.float64)).T


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return quat_to_matrix(np.concatenate([[np.cos(h)], np.sin(h) * axis]))


def rotation_angle(R) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


# -- Gaussians -------------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    confidence: float
    color: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scale components must be positive")
        if not (0.0 <= self.opacity <= 1.0 and 0.0 <= self.confidence <= 1.0):
            raise ValueError("opacity and confidence must lie in [0, 1]")


@dataclass
class GaussianModel:
    """Struct-of-arrays collection of Gaussians.

    ``opacity`` holds the raw decoded opacity; the rendered (fused) opacity is
    ``opacity * confidence``.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    confidences: np.ndarray
    colors: np.ndarray
    source_view: np.ndarray = field(default=None)
    n_views: int = 1

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.source_view is None:
            self.source_view = np.zeros(n, dtype=np.int64)
        self.source_view = np.asarray(self.source_view, dtype=np.int64).reshape(n)
        if n and self.source_view.max() >= self.n_views:
            raise ValueError("source_view index out of range")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i], self.scales[i], self.rotations[i],
                        float(self.opacities[i]), float(self.confidences[i]), self.colors[i])

    @classmethod
    def empty(cls, n_views: int = 1) -> "GaussianModel":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), n_views)

    @classmethod
    def from_gaussians(cls, gaussians, source_view=None, n_views: int = 1) -> "GaussianModel":
        gs = list(gaussians)
        if not gs:
            return cls.empty(n_views)
        return cls(np.array([g.mean for g in gs]), np.array([g.scale for g in gs]),
                   np.array([g.rotation for g in gs]), np.array([g.opacity for g in gs]),
                   np.array([g.confidence for g in gs]), np.array([g.color for g in gs]),
                   source_view, n_views)

    def subset(self, mask) -> "GaussianModel":
        return GaussianModel(self.means[mask], self.scales[mask], self.rotations[mask],
                             self.opacities[mask], self.confidences[mask], self.colors[mask],
                             self.source_view[mask], self.n_views)

    @property
    def effective_opacities(self) -> np.ndarray:
        return self.opacities * self.confidences


def covariance3d(scale, rotation) -> np.ndarray:
    """``R diag(s^2) R^T`` for one Gaussian or batches ``(N, 3)``/``(N, 4)``."""
    M = quat_to_matrix(rotation) * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel camera-z depth with a confidence weight in [0, 1]."""

    depth: np.ndarray
    confidence: np.ndarray = None

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        c = np.ones_like(d) if self.confidence is None else np.asarray(self.confidence, dtype=np.float64)
        if c.shape != d.shape:
            raise ValueError("confidence shape must match depth")
        finite = np.isfinite(d)
        if np.any(d[finite] <= 0):
            raise InvalidDepthError("finite depth values must be positive")
        if np.any((c < 0) | (c > 1)):
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "confidence", c)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class SceneBundle:
    """Input views with their (oracle or backbone) geometry and teacher copies.

    ``cameras``/``depths`` are the geometry the decoder consumes; the
    ``teacher_*`` lists are the fixed reference used by the teacher losses.
    ``gt_cameras``/``gt_depths`` hold ground truth for evaluation when known.
    """

    images: list
    cameras: list
    depths: list
    teacher_cameras: list = None
    teacher_depths: list = None
    gt_cameras: list = None
    gt_depths: list = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if self.teacher_cameras is None:
            self.teacher_cameras = list(self.cameras)
        if self.teacher_depths is None:
            self.teacher_depths = list(self.depths)
        if self.gt_cameras is None:
            self.gt_cameras = list(self.cameras)
        if self.gt_depths is None:
            self.gt_depths = list(self.depths)
        for name in ("cameras", "depths", "teacher_cameras", "teacher_depths"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        for img, cam, dm in zip(self.images, self.cameras, self.depths):
            if img.shape[:2] != (cam.height, cam.width) or dm.depth.shape != img.shape[:2]:
                raise ValueError("image, camera and depth resolutions disagree")

    def __len__(self) -> int:
        return len(self.images)
