"""Analytic synthetic scenes: ray-cast images, exact depth maps and cameras.

These scenes stand in for a learned reconstruction backbone: the decoder gets
exact (or deliberately perturbed) geometry and only has to place primitives.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Camera, DepthMap, SceneBundle, axis_angle_matrix

KINDS = ("textured_plane", "cube", "slanted_edge")
UP = np.array([0.0, -1.0, 0.0])


@dataclass
class SceneSpec:
    kind: str = "textured_plane"
    texture: dict = field(default_factory=lambda: {"pattern": "checker", "period": 0.2})
    n_cameras: int = 1
    radius: float = 2.0
    tilt_deg: float = 0.0
    look_at: tuple = (0.0, 0.0, 0.0)
    elevation_jitter_deg: float = 0.0
    width: int = 70
    height: int = 70
    focal: float = None
    supersample: int = 4
    seed: int = 0
    cameras: list = None
    cube_half_size: float = 0.5
    back_plane_z: float = 1.5
    teacher_noise: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {KINDS}")
        if self.width % 14 or self.height % 14 or self.width < 14 or self.height < 14:
            raise ValueError("resolution sides must be positive multiples of 14")
        if self.n_cameras < 1 and not self.cameras:
            raise ValueError("need at least one camera")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        if self.focal is None:
            self.focal = float(self.width)
        self.look_at = tuple(float(v) for v in self.look_at)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["look_at"] = list(self.look_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec fields: {sorted(unknown)}")
        return cls(**d)


def slanted_edge_spec(size: int = 70, angle_deg: float = 8.0, seed: int = 0, **kw) -> SceneSpec:
    tex = {"pattern": "edge", "angle_deg": angle_deg, "offset": 0.013,
           "dark": [0.15, 0.2, 0.3], "bright": [0.85, 0.8, 0.65]}
    return SceneSpec(kind="slanted_edge", texture=tex, width=size, height=size, seed=seed, **kw)


# -- textures -------------------------------------------------------------------------


def _hash_noise(ix, iy, seed, channel):
    h = (ix * 374761393 + iy * 668265263 + seed * 2147483647 + channel * 1274126177) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    return ((h ^ (h >> 16)) & 0xFFFF) / 65535.0


def _value_noise(X, Y, scale, seed):
    gx, gy = X / scale, Y / scale
    ix, iy = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
    fx, fy = gx - ix, gy - iy
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    out = []
    for ch in range(3):
        v00 = _hash_noise(ix, iy, seed, ch)
        v10 = _hash_noise(ix + 1, iy, seed, ch)
        v01 = _hash_noise(ix, iy + 1, seed, ch)
        v11 = _hash_noise(ix + 1, iy + 1, seed, ch)
        out.append((v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy)
    return np.stack(out, -1)


def planar_texture(tex: dict, X, Y, seed: int = 0) -> np.ndarray:
    """Color of a procedural texture at plane coordinates ``(X, Y)``."""
    pattern = tex.get("pattern", "checker")
    if pattern == "checker":
        p = tex.get("period", 0.2)
        c0 = np.asarray(tex.get("color0", [0.1, 0.1, 0.1]))
        c1 = np.asarray(tex.get("color1", [0.9, 0.9, 0.9]))
        k = (np.floor(X / p) + np.floor(Y / p)) % 2
        return np.where(k[..., None] > 0, c1, c0)
    if pattern == "grating":
        f = tex.get("frequency", 3.0)
        a = math.radians(tex.get("angle_deg", 30.0))
        amp = tex.get("amplitude", 0.4)
        base = np.asarray(tex.get("color", [0.5, 0.5, 0.5]))
        s = np.sin(2 * np.pi * f * (X * math.cos(a) + Y * math.sin(a)))
        return np.clip(base + amp * s[..., None] * np.array([1.0, 0.8, 0.6]), 0, 1)
    if pattern == "noise":
        return _value_noise(X, Y, tex.get("scale", 0.15), tex.get("seed", seed))
    if pattern == "edge":
        a = math.radians(tex.get("angle_deg", 8.0))
        side = X * math.cos(a) + Y * math.sin(a) > tex.get("offset", 0.0)
        return np.where(side[..., None], np.asarray(tex.get("bright", [0.85, 0.8, 0.65])),
                        np.asarray(tex.get("dark", [0.15, 0.2, 0.3])))
    raise ValueError(f"unknown texture pattern {pattern!r}")


CUBE_FACE_COLORS = np.array([[0.85, 0.3, 0.25], [0.25, 0.7, 0.35], [0.25, 0.4, 0.85],
                             [0.9, 0.8, 0.25], [0.7, 0.3, 0.8], [0.3, 0.8, 0.8]])


# -- ray casting ----------------------------------------------------------------------


def camera_rays(cam: Camera, supersample: int = 1):
    """World-space ray origins/directions for sub-pixel samples.

    Directions are scaled so that the ray parameter equals camera-frame depth.
    Returns ``(origin (3,), dirs (H, W, S, 3))``.
    """
    s = supersample
    off = (np.arange(s) + 0.5) / s
    ox, oy = np.meshgrid(off, off)
    u = np.arange(cam.width)[None, :, None] + ox.reshape(-1)[None, None, :]
    v = np.arange(cam.height)[:, None, None] + oy.reshape(-1)[None, None, :]
    u, v = np.broadcast_arrays(u, v)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(u.shape)], -1)
    return cam.center, d_cam @ cam.R


def intersect_plane_z(origin, dirs, z0: float = 0.0):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z0 - origin[2]) / dirs[..., 2]
    return np.where(np.isfinite(t) & (t > 0), t, np.inf)


def intersect_box(origin, dirs, half: float):
    """Slab-method ray/axis-aligned-cube intersection. Returns ``(t, face)``; face in 0..5."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = np.nanmax(tmin, axis=-1)
    t_far = np.nanmin(tmax, axis=-1)
    hit = (t_near <= t_far) & (t_far > 0) & (t_near > 0)
    axis = np.nanargmax(tmin, axis=-1)
    sign = np.take_along_axis(np.sign(dirs), axis[..., None], -1)[..., 0]
    # face index: 2*axis for the -axis face, 2*axis+1 for +axis
    face = 2 * axis + (sign < 0)
    return np.where(hit, t_near, np.inf), face


def _shade(spec: SceneSpec, origin, dirs):
    """Color and depth for a batch of rays."""
    if spec.kind in ("textured_plane", "slanted_edge"):
        t = intersect_plane_z(origin, dirs)
        P = origin + t[..., None] * dirs
        tex = spec.texture
        color = planar_texture(tex, np.nan_to_num(P[..., 0]), np.nan_to_num(P[..., 1]), spec.seed)
        color = np.where(np.isfinite(t)[..., None], color, 0.0)
        return color, t
    h = spec.cube_half_size
    t_box, face = intersect_box(origin, dirs, h)
    t_back = intersect_plane_z(origin, dirs, spec.back_plane_z)
    use_box = t_box <= t_back
    t = np.where(use_box, t_box, t_back)
    P = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    # in-face coordinates: the two axes orthogonal to the face normal
    axis = face // 2
    ua = np.where(axis == 0, P[..., 1], P[..., 0])
    va = np.where(axis == 2, P[..., 1], P[..., 2])
    checker = ((np.floor(ua / (h / 2)) + np.floor(va / (h / 2))) % 2)[..., None]
    box_col = CUBE_FACE_COLORS[face] * (0.75 + 0.25 * checker)
    back_col = planar_texture(spec.texture, P[..., 0], P[..., 1], spec.seed) * 0.6 + 0.2
    color = np.where(use_box[..., None], box_col, back_col)
    color = np.where(np.isfinite(t)[..., None], color, 0.0)
    return color, t


def render_view(spec: SceneSpec, cam: Camera):
    """Ray-cast one view: supersampled color and exact pixel-center depth."""
    origin, dirs = camera_rays(cam, spec.supersample)
    color, _ = _shade(spec, origin, dirs)
    image = np.clip(color.mean(axis=2), 0.0, 1.0)
    o1, d1 = camera_rays(cam, 1)
    _, depth = _shade(spec, o1, d1)
    return image, depth[:, :, 0]


def make_cameras(spec: SceneSpec) -> list:
    f = spec.focal
    W, H = spec.width, spec.height
    target = np.asarray(spec.look_at)
    if spec.cameras:
        return [Camera.look_at(c["eye"], c.get("look_at", target), c.get("up", UP), f, f, W, H)
                for c in spec.cameras]
    rng = np.random.default_rng(spec.seed)
    cams = []
    for k in range(spec.n_cameras):
        phi = 2 * np.pi * k / spec.n_cameras
        theta = math.radians(spec.tilt_deg + rng.normal(0.0, spec.elevation_jitter_deg)
                             if spec.elevation_jitter_deg else spec.tilt_deg)
        eye = target + spec.radius * np.array([math.sin(theta) * math.cos(phi),
                                               math.sin(theta) * math.sin(phi), -math.cos(theta)])
        cams.append(Camera.look_at(eye, target, UP, f, f, W, H))
    return cams


def generate(spec: SceneSpec) -> SceneBundle:
    cams = make_cameras(spec)
    images, depths = [], []
    for cam in cams:
        img, d = render_view(spec, cam)
        images.append(img)
        depths.append(DepthMap(d))
    bundle = SceneBundle(images, cams, depths, meta={"spec": spec.to_dict()})
    noise = spec.teacher_noise or {}
    if any(noise.get(k, 0.0) for k in ("sigma_rot_deg", "sigma_t", "sigma_depth")):
        bundle = perturb_teacher(bundle, noise.get("sigma_rot_deg", 0.0), noise.get("sigma_t", 0.0),
                                 noise.get("sigma_depth", 0.0), noise.get("seed", spec.seed))
    return bundle


def perturb_teacher(bundle: SceneBundle, sigma_rot_deg: float = 0.0, sigma_t: float = 0.0,
                    sigma_depth: float = 0.0, seed: int = 0) -> SceneBundle:
    """Replace the teacher geometry with noisy copies of the bundle's geometry.

    Rotations get an axis-angle perturbation with i.i.d. normal components of
    ``sigma_rot_deg``; translations get additive normal noise; depths are
    scaled by ``1 + N(0, sigma_depth)`` per pixel (kept positive).
    """
    rng = np.random.default_rng(seed)
    t_cams, t_depths = [], []
    for cam, dm in zip(bundle.cameras, bundle.depths):
        R, t = cam.R, cam.t
        if sigma_rot_deg:
            w = rng.normal(0.0, math.radians(sigma_rot_deg), 3)
            ang = np.linalg.norm(w)
            if ang > 0:
                R = axis_angle_matrix(w / ang, ang) @ R
        if sigma_t:
            t = t + rng.normal(0.0, sigma_t, 3)
        t_cams.append(cam.replace(R=R, t=t))
        d = dm.depth
        if sigma_depth:
            d = d * np.maximum(1.0 + rng.normal(0.0, sigma_depth, d.shape), 1e-3)
        t_depths.append(DepthMap(d, dm.confidence))
    return SceneBundle(list(bundle.images), list(bundle.cameras), list(bundle.depths), t_cams,
                       t_depths, bundle.gt_cameras, bundle.gt_depths, dict(bundle.meta))


def edge_line(spec: SceneSpec, cam: Camera) -> np.ndarray:
    """Image-space line ``(a, b, c)`` of the slanted edge, with ``a^2 + b^2 = 1``.

    The signed pixel distance of ``(x, y)`` to the edge is ``a*x + b*y + c``.
    """
    if spec.kind != "slanted_edge":
        raise ValueError("edge_line is only defined for slanted_edge scenes")
    a = math.radians(spec.texture.get("angle_deg", 8.0))
    off = spec.texture.get("offset", 0.0)
    n = np.array([math.cos(a), math.sin(a), 0.0])
    p0 = off * n
    p1 = p0 + np.array([-math.sin(a), math.cos(a), 0.0])
    pts = []
    for p in (p0, p1):
        pc = cam.R @ p + cam.t
        pts.append(np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy, 1.0]))
    line = np.cross(pts[0], pts[1])
    return line / np.linalg.norm(line[:2])
