"""Training losses and their analytic gradients.

Every ``loss_*`` function returns the scalar value together with gradients wrt
its differentiable inputs.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import Camera
from .rasterizer import RenderGrads, RenderOutput

logger = logging.getLogger(__name__)

# incremented whenever a masked loss sees an empty mask
counters: Counter = Counter()

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    l1: float = 1.0
    ssim: float = 0.2
    depth: float = 0.1
    normal: float = 0.05
    teach_depth: float = 1.0
    teach_t: float = 1.0
    teach_R: float = 1.0
    op: float = 0.01
    intr: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and non-negative")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(**{k: 0.0 for k in asdict(cls())})


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def loss_l1(pred, target):
    _check_shapes(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# -- SSIM ---------------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering over the two spatial axes
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_map(pred, target):
    """Per-pixel, per-channel SSIM map plus the intermediates needed for gradients."""
    _check_shapes(pred, target)
    x, y = _as_hwc(pred), _as_hwc(target)
    win = gaussian_window()
    C1, C2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _blur(x, win), _blur(y, win)
    exx, eyy, exy = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
    A1 = 2 * mx * my + C1
    A2 = 2 * (exy - mx * my) + C2
    B1 = mx * mx + my * my + C1
    B2 = (exx - mx * mx) + (eyy - my * my) + C2
    S = A1 * A2 / (B1 * B2)
    return S, (x, y, mx, my, A1, A2, B1, B2, win)


def ssim(pred, target) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    return float(np.mean(ssim_map(pred, target)[0]))


def loss_ssim(pred, target):
    """``1 - SSIM`` and its gradient wrt ``pred``."""
    S, (x, y, mx, my, A1, A2, B1, B2, win) = ssim_map(pred, target)
    gS = -1.0 / S.size
    d_mx = gS * ((2 * my * A2 - 2 * my * A1) / (B1 * B2) - S * (2 * mx / B1 - 2 * mx / B2))
    d_exx = gS * (-A1 * A2 / (B1 * B2 * B2))
    d_exy = gS * (2 * A1 / (B1 * B2))
    grad = _blur(d_mx, win) + 2 * x * _blur(d_exx, win) + y * _blur(d_exy, win)
    return 1.0 - float(np.mean(S)), grad.reshape(np.shape(pred))


# -- geometry consistency ---------------------------------------------------------------


def loss_depth_consistency(rendered_depth, predicted_depth, valid_mask):
    """Masked mean |rendered - predicted|. Returns ``(value, grad_rendered, grad_predicted)``."""
    _check_shapes(rendered_depth, predicted_depth)
    mask = np.asarray(valid_mask, dtype=bool) & np.isfinite(rendered_depth) & np.isfinite(predicted_depth)
    n = int(mask.sum())
    if n == 0:
        counters["empty_depth_mask"] += 1
        logger.warning("depth consistency loss: empty mask")
        z = np.zeros(np.shape(rendered_depth))
        return 0.0, z, z.copy()
    diff = np.where(mask, np.asarray(rendered_depth) - predicted_depth, 0.0)
    g = np.sign(diff) / n
    return float(np.abs(diff).sum() / n), g, -g


def camera_points(depth, cam: Camera) -> np.ndarray:
    """Camera-frame 3D point of every pixel center, shape (H, W, 3)."""
    d = np.asarray(depth, dtype=np.float64)
    H, W = d.shape
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    return np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], -1)


def normals_from_depth(depth, cam: Camera) -> np.ndarray:
    """Camera-frame unit normals of a depth map, oriented toward the camera.

    Tangents are central differences in the interior and one-sided on the border.
    """
    d = getattr(depth, "depth", depth)
    P = camera_points(d, cam)
    du = np.gradient(P, axis=1)
    dv = np.gradient(P, axis=0)
    n = np.cross(du, dv)
    # pixels next to invalid (non-finite) depth get no normal
    n = np.where(np.all(np.isfinite(n), axis=-1, keepdims=True), n, 0.0)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)
    flip = np.sum(n * np.nan_to_num(P, posinf=0.0, neginf=0.0), axis=-1, keepdims=True) > 0
    return np.where(flip, -n, n)


def loss_normal(rendered_normal, derived_normal, mask):
    """Masked mean of ``1 - |cos|``; sign-agnostic. Returns ``(value, grad_rendered)``."""
    _check_shapes(rendered_normal, derived_normal)
    r = np.asarray(rendered_normal, dtype=np.float64)
    d = np.asarray(derived_normal, dtype=np.float64)
    nr = np.linalg.norm(r, axis=-1)
    nd = np.linalg.norm(d, axis=-1)
    valid = np.asarray(mask, dtype=bool) & (nr > 1e-12) & (nd > 1e-12)
    n = int(valid.sum())
    grad = np.zeros_like(r)
    if n == 0:
        counters["empty_normal_mask"] += 1
        return 0.0, grad
    nr_, nd_ = nr[valid][:, None], nd[valid][:, None]
    rv, dv = r[valid], d[valid]
    cos = np.sum(rv * dv, axis=-1, keepdims=True) / (nr_ * nd_)
    grad[valid] = -np.sign(cos) * (dv / (nr_ * nd_) - cos * rv / nr_ ** 2) / n
    return float(np.sum(1.0 - np.abs(cos)) / n), grad


# -- teacher and regularizers ---------------------------------------------------------------


def geodesic_angle(R, R_ref) -> float:
    a = (np.trace(np.asarray(R).T @ R_ref) - 1.0) / 2.0
    return float(np.arccos(np.clip(a, -1.0, 1.0)))


@dataclass
class TeacherLoss:
    depth: float
    t: float
    R: float
    grad_depth: np.ndarray
    grad_t: np.ndarray
    grad_R: np.ndarray


def loss_teacher(depth, teacher_depth, teacher_conf, t, t_teacher, R, R_teacher) -> TeacherLoss:
    """Confidence-weighted depth L1, translation L1 and rotation geodesic distance."""
    _check_shapes(depth, teacher_depth)
    diff = np.asarray(depth, dtype=np.float64) - teacher_depth
    ok = np.isfinite(diff)
    conf = np.where(ok, np.asarray(teacher_conf, dtype=np.float64), 0.0)
    diff = np.where(ok, diff, 0.0)
    wsum = conf.sum()
    if wsum > 0:
        l_d = float(np.sum(conf * np.abs(diff)) / wsum)
        g_d = conf * np.sign(diff) / wsum
    else:
        l_d, g_d = 0.0, np.zeros_like(diff)
    dt = np.asarray(t, dtype=np.float64) - t_teacher
    a = (np.trace(np.asarray(R).T @ R_teacher) - 1.0) / 2.0
    if -1.0 < a < 1.0:
        g_R = -0.5 / np.sqrt(1.0 - a * a) * np.asarray(R_teacher, dtype=np.float64)
    else:
        g_R = np.zeros((3, 3))
    return TeacherLoss(l_d, float(np.abs(dt).sum()), float(np.arccos(np.clip(a, -1.0, 1.0))),
                       g_d, np.sign(dt), g_R)


def loss_opacity_reg(alpha, conf):
    """Mean of ``sin(pi * alpha * conf)``: zero at 0 and 1, maximal at 0.5.

    Returns ``(value, grad_alpha, grad_conf)``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    n = alpha.size
    if n == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ac = alpha * conf
    g = np.pi * np.cos(np.pi * ac) / n
    return float(np.mean(np.sin(np.pi * ac))), g * conf, g * alpha


def loss_intrinsics_var(cams):
    """Mean over (fx, fy, cx, cy) of the across-view variance. Returns ``(value, grad (n, 4))``."""
    K = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cams], dtype=np.float64).reshape(-1, 4)
    if len(K) == 0:
        raise ValueError("need at least one camera")
    dev = K - K.mean(axis=0)
    return float(np.mean(np.mean(dev ** 2, axis=0))), 2.0 * dev / (len(K) * 4)


# -- composite ---------------------------------------------------------------------------------


@dataclass
class ViewTerms:
    """Everything the loss needs about one input view."""

    image: np.ndarray
    self_render: RenderOutput
    full_render: RenderOutput
    depth: np.ndarray
    camera: Camera
    teacher_depth: np.ndarray
    teacher_conf: np.ndarray
    teacher_camera: Camera


@dataclass
class LossGrads:
    self_render: list = field(default_factory=list)
    full_render: list = field(default_factory=list)
    depth: list = field(default_factory=list)
    cam_t: list = field(default_factory=list)
    cam_R: list = field(default_factory=list)
    intrinsics: np.ndarray = None
    alpha: np.ndarray = None
    conf: np.ndarray = None


LOSS_NAMES = ("l1", "ssim", "depth", "normal", "teach_depth", "teach_t", "teach_R", "op", "intr")


def total_loss(views: list, alpha, conf, w: LossWeights):
    """Weighted sum of every loss over all views.

    Photometric terms average the self-render and the full render of each view;
    geometry terms use the full render; everything is averaged over views.
    Returns ``(total, breakdown, LossGrads)``.
    """
    nv = len(views)
    parts = dict.fromkeys(LOSS_NAMES, 0.0)
    grads = LossGrads()
    for v in views:
        g_self = np.zeros_like(v.self_render.color)
        g_full = np.zeros_like(v.full_render.color)
        for name, fn, wt in (("l1", loss_l1, w.l1), ("ssim", loss_ssim, w.ssim)):
            if wt == 0:
                continue
            ls, gs = fn(v.self_render.color, v.image)
            lf, gf = fn(v.full_render.color, v.image)
            parts[name] += 0.5 * (ls + lf) / nv
            g_self += wt * 0.5 * gs / nv
            g_full += wt * 0.5 * gf / nv
        g_med = np.zeros_like(v.full_render.median_depth)
        g_nrm = np.zeros_like(v.full_render.normal)
        g_pred = np.zeros_like(v.depth)
        mask = v.full_render.alpha >= 0.5
        if w.depth:
            ld, gr, gp = loss_depth_consistency(v.full_render.median_depth, v.depth, mask)
            parts["depth"] += ld / nv
            g_med += w.depth * gr / nv
            g_pred += w.depth * gp / nv
        if w.normal:
            # the depth-derived normal map is a fixed target (no gradient into depth)
            ln, gn = loss_normal(v.full_render.normal, normals_from_depth(v.depth, v.camera), mask)
            parts["normal"] += ln / nv
            g_nrm += w.normal * gn / nv
        tl = loss_teacher(v.depth, v.teacher_depth, v.teacher_conf, v.camera.t,
                          v.teacher_camera.t, v.camera.R, v.teacher_camera.R)
        parts["teach_depth"] += tl.depth / nv
        parts["teach_t"] += tl.t / nv
        parts["teach_R"] += tl.R / nv
        g_pred += w.teach_depth * tl.grad_depth / nv
        grads.cam_t.append(w.teach_t * tl.grad_t / nv)
        grads.cam_R.append(w.teach_R * tl.grad_R / nv)
        grads.self_render.append(RenderGrads(color=g_self))
        grads.full_render.append(RenderGrads(color=g_full, median_depth=g_med, normal=g_nrm))
        grads.depth.append(g_pred)
    lo, ga, gc = loss_opacity_reg(alpha, conf)
    parts["op"] = lo
    grads.alpha, grads.conf = w.op * ga, w.op * gc
    li, gi = loss_intrinsics_var([v.camera for v in views])
    parts["intr"] = li
    grads.intrinsics = w.intr * gi
    total = sum(getattr(w, k) * parts[k] for k in LOSS_NAMES)
    parts["total"] = total
    return total, parts, grads
