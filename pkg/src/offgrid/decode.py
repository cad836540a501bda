"""Decode 2D detections into camera-frame 3D Gaussians."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

from .core import Camera, GaussianModel
from .detection import Detections

logger = logging.getLogger(__name__)

# running count of detections dropped for invalid sampled depth
counters: Counter = Counter()

N_RAW = 11
IDENTITY_BIAS = np.array([1.0, 0.0, 0.0, 0.0])


# -- bilinear sampling --------------------------------------------------------


def _bilinear_setup(height: int, width: int, x, y):
    fx = np.asarray(x, dtype=np.float64) - 0.5
    fy = np.asarray(y, dtype=np.float64) - 0.5
    # border padding: clamp the continuous index, coordinate gradient vanishes outside
    mx = ((fx >= 0) & (fx <= width - 1)).astype(np.float64)
    my = ((fy >= 0) & (fy <= height - 1)).astype(np.float64)
    fx = np.clip(fx, 0, width - 1)
    fy = np.clip(fy, 0, height - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return x0, x1, y0, y1, fx - x0, fy - y0, mx, my


def bilinear_sample(buf: np.ndarray, x, y) -> np.ndarray:
    """Sample ``buf`` (H, W) or (H, W, C) at continuous pixel coordinates.

    Pixel centers sit at half-integer coordinates; queries outside the grid
    take the border value.
    """
    buf = np.asarray(buf, dtype=np.float64)
    x0, x1, y0, y1, wx, wy, _, _ = _bilinear_setup(buf.shape[0], buf.shape[1], x, y)
    if buf.ndim == 3:
        wx, wy = wx[..., None], wy[..., None]
    return ((1 - wx) * (1 - wy) * buf[y0, x0] + wx * (1 - wy) * buf[y0, x1]
            + (1 - wx) * wy * buf[y1, x0] + wx * wy * buf[y1, x1])


def bilinear_backward(buf: np.ndarray, x, y, grad_out) -> tuple:
    """Returns ``(grad_x, grad_y, grad_buf)`` for :func:`bilinear_sample`."""
    buf = np.asarray(buf, dtype=np.float64)
    H, W = buf.shape[:2]
    x0, x1, y0, y1, wx, wy, mx, my = _bilinear_setup(H, W, x, y)
    g = np.asarray(grad_out, dtype=np.float64)
    if buf.ndim == 2:
        g = g[..., None]
        b = buf[..., None]
    else:
        b = buf
    v00, v01, v10, v11 = b[y0, x0], b[y0, x1], b[y1, x0], b[y1, x1]
    wx_, wy_ = wx[..., None], wy[..., None]
    dvdx = (1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)
    dvdy = (1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)
    grad_x = np.sum(g * dvdx, axis=-1) * mx
    grad_y = np.sum(g * dvdy, axis=-1) * my
    grad_buf = np.zeros(b.shape)
    C = b.shape[-1]
    gf = g.reshape(-1, C)
    for yy, xx, w in ((y0, x0, (1 - wx_) * (1 - wy_)), (y0, x1, wx_ * (1 - wy_)),
                      (y1, x0, (1 - wx_) * wy_), (y1, x1, wx_ * wy_)):
        np.add.at(grad_buf, (yy.reshape(-1), xx.reshape(-1)), (w.reshape(-1, 1) * gf))
    if buf.ndim == 2:
        grad_buf = grad_buf[..., 0]
    return grad_x, grad_y, grad_buf


# -- descriptor MLP --------------------------------------------------------------


@dataclass
class MlpWeights:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        H, D = self.W1.shape
        if self.b1.shape != (H,) or self.W2.shape != (N_RAW, H) or self.b2.shape != (N_RAW,):
            raise ValueError("inconsistent MLP weight shapes")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int = 32, hidden: int = 64,
             std: float = 0.1) -> "MlpWeights":
        return cls(rng.normal(0.0, std, (hidden, input_dim)), np.zeros(hidden),
                   rng.normal(0.0, std, (N_RAW, hidden)), np.zeros(N_RAW))

    @classmethod
    def zeros_like(cls, other: "MlpWeights") -> "MlpWeights":
        return cls(*(np.zeros_like(getattr(other, f.name)) for f in fields(cls)))

    def arrays(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MlpWeights":
        return MlpWeights(*(a.copy() for a in self.arrays()))


def mlp_forward(w: MlpWeights, desc: np.ndarray):
    """affine -> ReLU -> affine. Returns ``(raw, cache)``; ``raw`` is (N, 11)."""
    desc = np.asarray(desc, dtype=np.float64)
    if desc.shape[-1] != w.input_dim:
        raise ValueError(f"descriptor width {desc.shape[-1]} != MLP input {w.input_dim}")
    pre = desc @ w.W1.T + w.b1
    hid = np.maximum(pre, 0.0)
    return hid @ w.W2.T + w.b2, (desc, pre, hid)


def mlp_backward(w: MlpWeights, cache, grad_raw: np.ndarray):
    """Returns ``(grad_weights, grad_desc)``."""
    desc, pre, hid = cache
    gW2 = grad_raw.T @ hid
    gb2 = grad_raw.sum(axis=0)
    g_hid = grad_raw @ w.W2
    g_pre = g_hid * (pre > 0)
    gW1 = g_pre.T @ desc
    gb1 = g_pre.sum(axis=0)
    return MlpWeights(gW1, gb1, gW2, gb2), g_pre @ w.W1


# -- activations -----------------------------------------------------------------


@dataclass(frozen=True)
class ScaleBounds:
    s_min: float = 1e-4
    s_max: float = 0.05

    def __post_init__(self):
        if not (0 < self.s_min < self.s_max):
            raise ValueError("need 0 < s_min < s_max")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activate_params(raw: np.ndarray, depth, bounds: ScaleBounds = ScaleBounds()):
    """Map raw MLP outputs to ``(scale, quaternion, opacity, confidence)``.

    Scales are interpolated between the bounds by a sigmoid and multiplied by
    depth; the quaternion is the normalized raw output biased toward identity.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    sig = sigmoid(raw[:, :3])
    scale = (bounds.s_min + sig * (bounds.s_max - bounds.s_min)) * depth[:, None]
    qr = raw[:, 3:7] + IDENTITY_BIAS
    n = np.linalg.norm(qr, axis=1, keepdims=True)
    degenerate = n[:, 0] < 1e-12
    q = np.where(degenerate[:, None], IDENTITY_BIAS, qr / np.where(n > 0, n, 1.0))
    return scale, q, sigmoid(raw[:, 7]), sigmoid(raw[:, 8])


def activate_backward(raw, depth, bounds, g_scale, g_q, g_alpha, g_conf):
    """Returns ``(grad_raw, grad_depth)``."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(raw)
    sig = sigmoid(raw[:, :3])
    span = bounds.s_max - bounds.s_min
    grad[:, :3] = g_scale * span * sig * (1 - sig) * depth[:, None]
    grad_depth = np.sum(g_scale * (bounds.s_min + sig * span), axis=1)
    qr = raw[:, 3:7] + IDENTITY_BIAS
    n = np.linalg.norm(qr, axis=1, keepdims=True)
    ok = n[:, 0] >= 1e-12
    u = qr / np.where(n > 0, n, 1.0)
    gq = (g_q - u * np.sum(u * g_q, axis=1, keepdims=True)) / np.where(n > 0, n, 1.0)
    grad[:, 3:7] = np.where(ok[:, None], gq, 0.0)
    a = sigmoid(raw[:, 7])
    c = sigmoid(raw[:, 8])
    grad[:, 7] = g_alpha * a * (1 - a)
    grad[:, 8] = g_conf * c * (1 - c)
    return grad, grad_depth


# -- per-view decoding -------------------------------------------------------------


@dataclass
class GaussianGrads:
    """Gradients wrt the per-primitive arrays of a :class:`GaussianModel`."""

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    confidences: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros(n), np.zeros((n, 3)))

    def subset(self, idx) -> "GaussianGrads":
        return GaussianGrads(*(getattr(self, f.name)[idx] for f in fields(self)))


@dataclass
class DecodeCache:
    xy: np.ndarray
    valid: np.ndarray
    depth: np.ndarray
    raw: np.ndarray
    mlp_cache: tuple
    n_dropped: int


def decode_view(detections: Detections, depth_map: np.ndarray, image: np.ndarray,
                desc_field: np.ndarray, mlp: MlpWeights, cam: Camera,
                bounds: ScaleBounds = ScaleBounds()):
    """Decode one view's detections into camera-frame Gaussians.

    Depth, color and descriptors are bilinearly sampled at each detection.
    Detections whose sampled depth is not positive are dropped. Returns
    ``(model, cache)`` where ``model`` is a camera-frame :class:`GaussianModel`.
    """
    H, W = depth_map.shape
    if image.shape[:2] != (H, W) or desc_field.shape[:2] != (H, W):
        raise ValueError("depth, image and descriptor field must share a resolution")
    xy = detections.xy
    d_all = bilinear_sample(depth_map, xy[:, 0], xy[:, 1])
    valid = np.isfinite(d_all) & (d_all > 0)
    n_dropped = int((~valid).sum())
    if n_dropped:
        counters["invalid_depth"] += n_dropped
        logger.debug("dropped %d detections with invalid depth", n_dropped)
    xy = xy[valid]
    d = d_all[valid]
    mean = np.stack([(xy[:, 0] - cam.cx) / cam.fx * d, (xy[:, 1] - cam.cy) / cam.fy * d, d], -1)
    color = bilinear_sample(image, xy[:, 0], xy[:, 1])
    desc = bilinear_sample(desc_field, xy[:, 0], xy[:, 1])
    raw, mcache = mlp_forward(mlp, desc)
    scale, q, alpha, conf = activate_params(raw, d, bounds)
    model = GaussianModel(mean, scale, q, alpha, conf, color)
    return model, DecodeCache(xy, valid, d, raw, mcache, n_dropped)


def decode_view_backward(cache: DecodeCache, grads: GaussianGrads, depth_map, image, desc_field,
                         mlp: MlpWeights, cam: Camera, bounds: ScaleBounds = ScaleBounds()):
    """Backpropagate camera-frame Gaussian gradients through :func:`decode_view`.

    Returns ``(grad_xy, grad_desc_field, grad_mlp, grad_depth_map)``; ``grad_xy``
    is indexed like the *input* detections (zero rows for dropped ones).
    """
    xy, d = cache.xy, cache.depth
    g_raw, g_d = activate_backward(cache.raw, d, bounds, grads.scales, grads.rotations,
                                   grads.opacities, grads.confidences)
    g_mlp, g_desc = mlp_backward(mlp, cache.mlp_cache, g_raw)
    gm = grads.means
    g_d = g_d + gm[:, 0] * (xy[:, 0] - cam.cx) / cam.fx + gm[:, 1] * (xy[:, 1] - cam.cy) / cam.fy + gm[:, 2]
    gx = gm[:, 0] * d / cam.fx
    gy = gm[:, 1] * d / cam.fy
    dx, dy, g_depth_map = bilinear_backward(depth_map, xy[:, 0], xy[:, 1], g_d)
    cx_, cy_, _ = bilinear_backward(image, xy[:, 0], xy[:, 1], grads.colors)
    sx, sy, g_desc_field = bilinear_backward(desc_field, xy[:, 0], xy[:, 1], g_desc)
    grad_xy = np.zeros((len(cache.valid), 2))
    grad_xy[cache.valid, 0] = gx + dx + cx_ + sx
    grad_xy[cache.valid, 1] = gy + dy + cy_ + sy
    return grad_xy, g_desc_field, g_mlp, g_depth_map


def center_crop(img: np.ndarray, multiple: int = 14) -> np.ndarray:
    """Crop (H, W, ...) to the largest multiple of ``multiple`` on each side, centered."""
    H, W = img.shape[:2]
    h, w = H - H % multiple, W - W % multiple
    y0, x0 = (H - h) // 2, (W - w) // 2
    return img[y0:y0 + h, x0:x0 + w]


def center_crop_camera(cam: Camera, multiple: int = 14) -> Camera:
    h, w = cam.height - cam.height % multiple, cam.width - cam.width % multiple
    y0, x0 = (cam.height - h) // 2, (cam.width - w) // 2
    return cam.replace(cx=cam.cx - x0, cy=cam.cy - y0, width=w, height=h)
