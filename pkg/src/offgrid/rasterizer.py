"""Differentiable tile-based Gaussian splatting.

Produces color, accumulated alpha, median depth and normal buffers. The
compositing kernels are compiled with numba; projection and the covariance
algebra stay in numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import (Camera, GaussianModel, normalize_backward, quat_normalize, quat_to_matrix,
                   quat_to_matrix_backward)
from .decode import GaussianGrads

TILE = 16
DILATION = 0.3
NEAR = 0.01
T_MIN = 1e-4
ALPHA_MIN = 1.0 / 255.0
MEDIAN_LEVEL = 0.5
# sqrt of the chi-square(2) 99% quantile: 99%-mass ellipse in Mahalanobis units
MASS99_RADIUS = float(np.sqrt(-2.0 * np.log(0.01)))


class NonFiniteSplatError(ValueError):
    pass


@dataclass
class Splats:
    """Screen-space splats. ``cov2d`` rows are ``(xx, xy, yy)`` in px^2."""

    centers: np.ndarray
    cov2d: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.depths)

    @classmethod
    def empty(cls) -> "Splats":
        return cls(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)))

    def take(self, idx) -> "Splats":
        return Splats(self.centers[idx], self.cov2d[idx], self.depths[idx], self.colors[idx],
                      self.opacities[idx], self.normals[idx])


@dataclass
class SplatGrads:
    centers: np.ndarray
    cov2d: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    normals: np.ndarray


@dataclass
class CameraGrads:
    R: np.ndarray
    t: np.ndarray
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    median_depth: np.ndarray
    normal: np.ndarray
    # state kept for the backward pass
    tile_offsets: np.ndarray = None
    tile_list: np.ndarray = None
    normal_accum: np.ndarray = None

    @classmethod
    def empty(cls, width: int, height: int) -> "RenderOutput":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width)), np.zeros((height, width, 3)))


@dataclass
class RenderGrads:
    color: np.ndarray = None
    alpha: np.ndarray = None
    median_depth: np.ndarray = None
    normal: np.ndarray = None


# -- projection ---------------------------------------------------------------------


def splat_radius(cov2d: np.ndarray, opacities: np.ndarray) -> np.ndarray:
    """Half-extent (px) of the square that bounds a splat's footprint.

    Covers the 99%-mass ellipse and every pixel where ``opacity * G`` can reach
    the 1/255 skip threshold, so binning never truncates a visible contribution.
    """
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    with np.errstate(divide="ignore"):
        ext = np.sqrt(np.maximum(2.0 * np.log(np.maximum(opacities, 1e-300) * 255.0), 0.0))
    return np.maximum(ext, MASS99_RADIUS) * np.sqrt(lam_max)


@dataclass
class ProjectionCache:
    ids: np.ndarray
    p_cam: np.ndarray
    R_q: np.ndarray
    q_unit: np.ndarray
    q_raw: np.ndarray
    scales: np.ndarray
    J: np.ndarray
    M: np.ndarray
    sigma: np.ndarray
    short_axis: np.ndarray
    flip: np.ndarray
    opacity_raw: np.ndarray
    confidence: np.ndarray
    use_confidence: bool


def shortest_axis(scales: np.ndarray) -> np.ndarray:
    """Index of the smallest scale; ties go to the lowest index."""
    return np.argmin(scales, axis=1)


def project_gaussians(model: GaussianModel, cam: Camera, use_confidence: bool = True):
    """Project world-frame Gaussians into ``cam``.

    Returns ``(splats, cache)``; culled primitives (behind the near plane or
    entirely off-screen) are absent from ``splats`` and ``cache.ids`` maps each
    splat back to its model index.
    """
    n = len(model)
    p = model.means @ cam.R.T + cam.t if n else np.zeros((0, 3))
    z = p[:, 2]
    front = z > NEAR
    ids = np.nonzero(front)[0]
    p = p[ids]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    q_raw = model.rotations[ids]
    q = quat_normalize(q_raw) if len(ids) else q_raw
    Rq = quat_to_matrix(q) if len(ids) else np.zeros((0, 3, 3))
    s = model.scales[ids]
    A = Rq * s[:, None, :]
    sigma = A @ np.swapaxes(A, 1, 2)
    J = np.zeros((len(ids), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z ** 2
    M = J @ cam.R
    cov = M @ sigma @ np.swapaxes(M, 1, 2)
    cov2d = np.stack([cov[:, 0, 0] + DILATION, cov[:, 0, 1], cov[:, 1, 1] + DILATION], -1)
    centers = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], -1)
    k = shortest_axis(s)
    n_world = Rq[np.arange(len(ids)), :, k]
    n_cam = n_world @ cam.R.T
    flip = np.where(np.sum(n_cam * p, axis=1) > 0, -1.0, 1.0)
    n_cam = n_cam * flip[:, None]
    alpha = model.opacities[ids]
    conf = model.confidences[ids]
    opac = alpha * conf if use_confidence else alpha.copy()
    r = splat_radius(cov2d, opac)
    onscreen = ((centers[:, 0] + r > 0) & (centers[:, 0] - r < cam.width)
                & (centers[:, 1] + r > 0) & (centers[:, 1] - r < cam.height))
    keep = np.nonzero(onscreen)[0]
    splats = Splats(centers[keep], cov2d[keep], z[keep], model.colors[ids[keep]], opac[keep],
                    n_cam[keep])
    cache = ProjectionCache(ids[keep], p[keep], Rq[keep], q[keep], q_raw[keep], s[keep], J[keep],
                            M[keep], sigma[keep], k[keep], flip[keep], alpha[keep], conf[keep],
                            use_confidence)
    return splats, cache


def project_gaussians_backward(cache: ProjectionCache, grads: SplatGrads, cam: Camera, n_model: int):
    """Chain splat gradients back to the world-frame model and the camera.

    Returns ``(GaussianGrads, CameraGrads)``.
    """
    out = GaussianGrads.zeros(n_model)
    gR = np.zeros((3, 3))
    m = len(cache.ids)
    if m == 0:
        return out, CameraGrads(gR, np.zeros(3))
    p, J, M, sigma, Rq, s = cache.p_cam, cache.J, cache.M, cache.sigma, cache.R_q, cache.scales
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    gc = grads.cov2d
    Gm = np.zeros((m, 2, 2))
    Gm[:, 0, 0] = gc[:, 0]
    Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * gc[:, 1]
    Gm[:, 1, 1] = gc[:, 2]
    gM = 2.0 * Gm @ M @ sigma
    gSigma = np.swapaxes(M, 1, 2) @ Gm @ M
    gA = 2.0 * gSigma @ (Rq * s[:, None, :])
    gRq = gA * s[:, None, :]
    g_s = np.sum(gA * Rq, axis=1)
    # normal = flip * R @ Rq[:, :, k]
    gn = grads.normals * cache.flip[:, None]
    rows = np.arange(m)
    gRq[rows, :, cache.short_axis] += gn @ cam.R
    n_world = Rq[rows, :, cache.short_axis]
    gR += gn.T @ n_world
    gJ = gM @ cam.R.T
    gR += np.einsum("nij,nik->jk", J, gM)
    gp = np.zeros((m, 3))
    gcen = grads.centers
    gp[:, 0] = gcen[:, 0] * cam.fx / z + gJ[:, 0, 2] * (-cam.fx / z ** 2)
    gp[:, 1] = gcen[:, 1] * cam.fy / z + gJ[:, 1, 2] * (-cam.fy / z ** 2)
    gp[:, 2] = (-gcen[:, 0] * cam.fx * x / z ** 2 - gcen[:, 1] * cam.fy * y / z ** 2
                + gJ[:, 0, 0] * (-cam.fx / z ** 2) + gJ[:, 0, 2] * (2 * cam.fx * x / z ** 3)
                + gJ[:, 1, 1] * (-cam.fy / z ** 2) + gJ[:, 1, 2] * (2 * cam.fy * y / z ** 3)
                + grads.depths)
    gfx = np.sum(gcen[:, 0] * x / z + gJ[:, 0, 0] / z - gJ[:, 0, 2] * x / z ** 2)
    gfy = np.sum(gcen[:, 1] * y / z + gJ[:, 1, 1] / z - gJ[:, 1, 2] * y / z ** 2)
    gcx = float(np.sum(gcen[:, 0]))
    gcy = float(np.sum(gcen[:, 1]))
    means_world = (p - cam.t) @ cam.R
    gR += gp.T @ means_world
    gt = gp.sum(axis=0)
    gq_unit = quat_to_matrix_backward(cache.q_unit, gRq)
    gq = normalize_backward(cache.q_raw, gq_unit)
    ids = cache.ids
    out.means[ids] = gp @ cam.R
    out.scales[ids] = g_s
    out.rotations[ids] = gq
    out.colors[ids] = grads.colors
    if cache.use_confidence:
        out.opacities[ids] = grads.opacities * cache.confidence
        out.confidences[ids] = grads.opacities * cache.opacity_raw
    else:
        out.opacities[ids] = grads.opacities
    return out, CameraGrads(gR, gt, float(gfx), float(gfy), gcx, gcy)


# -- compositing kernels ---------------------------------------------------------------


@numba.njit(cache=True)
def _bin_tiles(order, centers, radii, width, height, tile):
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    counts = np.zeros(tx_n * ty_n + 1, dtype=np.int64)
    rects = np.empty((order.size, 4), dtype=np.int64)
    for oi in range(order.size):
        k = order[oi]
        x0 = int(np.floor((centers[k, 0] - radii[k]) / tile))
        x1 = int(np.floor((centers[k, 0] + radii[k]) / tile))
        y0 = int(np.floor((centers[k, 1] - radii[k]) / tile))
        y1 = int(np.floor((centers[k, 1] + radii[k]) / tile))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, tx_n - 1)
        y1 = min(y1, ty_n - 1)
        rects[oi, 0] = x0
        rects[oi, 1] = x1
        rects[oi, 2] = y0
        rects[oi, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tx_n + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lst = np.empty(offsets[-1], dtype=np.int64)
    for oi in range(order.size):
        for ty in range(rects[oi, 2], rects[oi, 3] + 1):
            for tx in range(rects[oi, 0], rects[oi, 1] + 1):
                t = ty * tx_n + tx
                lst[fill[t]] = order[oi]
                fill[t] += 1
    return offsets, lst


@numba.njit(cache=True)
def _raster_forward(offsets, lst, centers, conics, opac, colors, normals, depths, width, height,
                    tile, t_min, alpha_min, median_level,
                    out_color, out_alpha, out_depth, out_nacc):
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    for ty in range(ty_n):
        for tx in range(tx_n):
            t = ty * tx_n + tx
            s0 = offsets[t]
            s1 = offsets[t + 1]
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    fx = px + 0.5
                    fy = py + 0.5
                    T = 1.0
                    med_set = False
                    for li in range(s0, s1):
                        k = lst[li]
                        dx = fx - centers[k, 0]
                        dy = fy - centers[k, 1]
                        power = -0.5 * (conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy
                                        + conics[k, 2] * dy * dy)
                        if power > 0.0:
                            power = 0.0
                        a = opac[k] * np.exp(power)
                        if a < alpha_min:
                            continue
                        w = a * T
                        for c in range(3):
                            out_color[py, px, c] += w * colors[k, c]
                            out_nacc[py, px, c] += w * normals[k, c]
                        T = T * (1.0 - a)
                        if not med_set and T <= median_level:
                            out_depth[py, px] = depths[k]
                            med_set = True
                        if T < t_min:
                            break
                    out_alpha[py, px] = 1.0 - T


@numba.njit(cache=True)
def _raster_backward(offsets, lst, centers, conics, opac, colors, normals, depths, width, height,
                     tile, t_min, alpha_min, median_level,
                     g_color, g_alpha, g_depth, g_nacc,
                     o_centers, o_conics, o_opac, o_colors, o_normals, o_depths):
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    for ty in range(ty_n):
        for tx in range(tx_n):
            t = ty * tx_n + tx
            s0 = offsets[t]
            s1 = offsets[t + 1]
            n_max = s1 - s0
            ks = np.empty(n_max, dtype=np.int64)
            As = np.empty(n_max)
            Gs = np.empty(n_max)
            Ts = np.empty(n_max)
            DX = np.empty(n_max)
            DY = np.empty(n_max)
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    fx = px + 0.5
                    fy = py + 0.5
                    # replay the forward pass to recover the contributing list
                    T = 1.0
                    cnt = 0
                    med_k = -1
                    for li in range(s0, s1):
                        k = lst[li]
                        dx = fx - centers[k, 0]
                        dy = fy - centers[k, 1]
                        power = -0.5 * (conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy
                                        + conics[k, 2] * dy * dy)
                        if power > 0.0:
                            power = 0.0
                        g = np.exp(power)
                        a = opac[k] * g
                        if a < alpha_min:
                            continue
                        ks[cnt] = k
                        As[cnt] = a
                        Gs[cnt] = g
                        Ts[cnt] = T
                        DX[cnt] = dx
                        DY[cnt] = dy
                        cnt += 1
                        T = T * (1.0 - a)
                        if med_k < 0 and T <= median_level:
                            med_k = k
                        if T < t_min:
                            break
                    if med_k >= 0:
                        o_depths[med_k] += g_depth[py, px]
                    ga = g_alpha[py, px]
                    R = 0.0
                    P = 1.0
                    for j in range(cnt - 1, -1, -1):
                        k = ks[j]
                        a = As[j]
                        Tj = Ts[j]
                        w = a * Tj
                        v = 0.0
                        for c in range(3):
                            o_colors[k, c] += w * g_color[py, px, c]
                            o_normals[k, c] += w * g_nacc[py, px, c]
                            v += colors[k, c] * g_color[py, px, c] + normals[k, c] * g_nacc[py, px, c]
                        dL_da = Tj * (v - R) + ga * Tj * P
                        R = a * v + (1.0 - a) * R
                        P = (1.0 - a) * P
                        g = Gs[j]
                        o_opac[k] += dL_da * g
                        dpow = dL_da * opac[k] * g
                        dx = DX[j]
                        dy = DY[j]
                        cxx = conics[k, 0]
                        cxy = conics[k, 1]
                        cyy = conics[k, 2]
                        # power clamp at 0 only bites for non-PSD conics; treated as identity
                        o_centers[k, 0] += dpow * (cxx * dx + cxy * dy)
                        o_centers[k, 1] += dpow * (cxy * dx + cyy * dy)
                        o_conics[k, 0] += dpow * (-0.5 * dx * dx)
                        o_conics[k, 1] += dpow * (-dx * dy)
                        o_conics[k, 2] += dpow * (-0.5 * dy * dy)


def _conics(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], -1)


def depth_order(depths: np.ndarray) -> np.ndarray:
    """Front-to-back order; equal depths keep input order."""
    return np.argsort(depths, kind="stable")


def _check_finite(splats: Splats):
    for name in ("centers", "cov2d", "depths", "colors", "opacities", "normals"):
        if not np.all(np.isfinite(getattr(splats, name))):
            raise NonFiniteSplatError(f"non-finite splat {name}")


def rasterize(splats: Splats, width: int, height: int) -> RenderOutput:
    """Front-to-back composite ``splats`` into a ``height x width`` image."""
    _check_finite(splats)
    out = RenderOutput.empty(width, height)
    n = len(splats)
    nacc = np.zeros((height, width, 3))
    if n == 0:
        out.tile_offsets = np.zeros(1, dtype=np.int64)
        out.tile_list = np.zeros(0, dtype=np.int64)
        out.normal_accum = nacc
        return out
    conics = _conics(splats.cov2d)
    radii = splat_radius(splats.cov2d, splats.opacities)
    offsets, lst = _bin_tiles(depth_order(splats.depths), splats.centers, radii, width, height, TILE)
    _raster_forward(offsets, lst, splats.centers, conics, splats.opacities, splats.colors,
                    splats.normals, splats.depths, width, height, TILE, T_MIN, ALPHA_MIN,
                    MEDIAN_LEVEL, out.color, out.alpha, out.median_depth, nacc)
    norm = np.linalg.norm(nacc, axis=-1, keepdims=True)
    out.normal = np.where(norm > 1e-12, nacc / np.where(norm > 1e-12, norm, 1.0), 0.0)
    out.tile_offsets, out.tile_list, out.normal_accum = offsets, lst, nacc
    return out


def rasterize_backward(splats: Splats, render: RenderOutput, grad: RenderGrads) -> SplatGrads:
    """Exact gradients of :func:`rasterize` wrt every splat attribute."""
    n = len(splats)
    H, W = render.alpha.shape
    out = SplatGrads(np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                     np.zeros(n), np.zeros((n, 3)))
    if n == 0:
        return out
    g_color = np.zeros((H, W, 3)) if grad.color is None else np.ascontiguousarray(grad.color, dtype=np.float64)
    g_alpha = np.zeros((H, W)) if grad.alpha is None else np.ascontiguousarray(grad.alpha, dtype=np.float64)
    g_depth = np.zeros((H, W)) if grad.median_depth is None else np.ascontiguousarray(grad.median_depth, dtype=np.float64)
    g_nacc = np.zeros((H, W, 3))
    if grad.normal is not None:
        nacc = render.normal_accum
        norm = np.linalg.norm(nacc, axis=-1, keepdims=True)
        ok = norm > 1e-12
        safe = np.where(ok, nacc, 1.0)
        g_nacc = np.where(ok, normalize_backward(safe, grad.normal), 0.0)
    conics = _conics(splats.cov2d)
    g_conics = np.zeros((n, 3))
    _raster_backward(render.tile_offsets, render.tile_list, splats.centers, conics,
                     splats.opacities, splats.colors, splats.normals, splats.depths, W, H, TILE,
                     T_MIN, ALPHA_MIN, MEDIAN_LEVEL, g_color, g_alpha, g_depth, g_nacc,
                     out.centers, g_conics, out.opacities, out.colors, out.normals, out.depths)
    # conic = inverse(cov): dL/dcov = -conic @ G @ conic, with G the symmetric conic gradient
    Cm = np.stack([np.stack([conics[:, 0], conics[:, 1]], -1),
                   np.stack([conics[:, 1], conics[:, 2]], -1)], -2)
    G = np.stack([np.stack([g_conics[:, 0], 0.5 * g_conics[:, 1]], -1),
                  np.stack([0.5 * g_conics[:, 1], g_conics[:, 2]], -1)], -2)
    gcov = -Cm @ G @ Cm
    out.cov2d = np.stack([gcov[:, 0, 0], 2.0 * gcov[:, 0, 1], gcov[:, 1, 1]], -1)
    return out


# -- model-level rendering ---------------------------------------------------------------


def render(model: GaussianModel, cam: Camera, use_confidence: bool = True):
    """Project and rasterize ``model``. Returns ``(RenderOutput, splats, cache)``."""
    splats, cache = project_gaussians(model, cam, use_confidence)
    return rasterize(splats, cam.width, cam.height), splats, cache


def render_backward(model: GaussianModel, cam: Camera, out: RenderOutput, splats: Splats,
                    cache: ProjectionCache, grad: RenderGrads):
    sg = rasterize_backward(splats, out, grad)
    return project_gaussians_backward(cache, sg, cam, len(model))


def self_render(model: GaussianModel, view_index: int, cam: Camera) -> RenderOutput:
    """Render only the primitives decoded from ``view_index``, ignoring confidence."""
    sub = model.subset(model.source_view == view_index)
    return render(sub, cam, use_confidence=False)[0]
