"""Sub-pixel primitive detection: spatial softmax followed by DSNT.

Every primitive owns one 14x14 logit grid. Heatmaps are normalized over the
spatial axes only, and the primitive's 2D center is the heatmap-weighted mean of
the global pixel-center coordinates of its patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import PATCH_SIZE, DensityAssignment

DEFAULT_TEMPERATURE = 0.2


def spatial_softmax(logits: np.ndarray, tau: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Softmax over the last two axes of ``logits / tau``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=(-2, -1), keepdims=True)


def cell_centers(patch_size: int = PATCH_SIZE):
    """Local pixel-center offsets ``(cx, cy)`` of a patch, each shaped (ps, ps) as [row, col]."""
    c = np.arange(patch_size) + 0.5
    return np.meshgrid(c, c)


def dsnt(h: np.ndarray, patch_origin) -> tuple:
    """Expected global coordinates under heatmap(s) ``h`` of shape (..., ps, ps).

    ``patch_origin`` is the global ``(x, y)`` of the patch's top-left corner,
    broadcastable to ``h.shape[:-2] + (2,)``.
    """
    h = np.asarray(h, dtype=np.float64)
    cx, cy = cell_centers(h.shape[-1])
    origin = np.asarray(patch_origin, dtype=np.float64)
    x = np.sum(h * cx, axis=(-2, -1)) + origin[..., 0]
    y = np.sum(h * cy, axis=(-2, -1)) + origin[..., 1]
    return x, y


def dsnt_backward(h: np.ndarray, patch_origin, grad_xy, tau: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Gradient wrt the logits that produced ``h``.

    ``grad_xy`` has shape ``h.shape[:-2] + (2,)``. Uses
    ``dx/dlogit(i,j) = h(i,j) * (c_x(i,j) - x) / tau``.
    """
    h = np.asarray(h, dtype=np.float64)
    grad_xy = np.asarray(grad_xy, dtype=np.float64)
    cx, cy = cell_centers(h.shape[-1])
    # local coordinates suffice: the origin cancels in (c - x)
    x = np.sum(h * cx, axis=(-2, -1))[..., None, None]
    y = np.sum(h * cy, axis=(-2, -1))[..., None, None]
    gx = grad_xy[..., 0, None, None]
    gy = grad_xy[..., 1, None, None]
    return h * (gx * (cx - x) + gy * (cy - y)) / tau


@dataclass
class HeatmapField:
    """Logit grids for every primitive of one view, flattened in detection order.

    ``logits[k]`` is the 14x14 grid of primitive ``k``; primitives are ordered by
    patch (row-major) and then channel index, with the number of channels of
    each patch given by ``density.level``.
    """

    density: DensityAssignment
    logits: np.ndarray
    tau: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.patch_index, self.channel_index = primitive_layout(self.density)
        expected = (len(self.patch_index), PATCH_SIZE, PATCH_SIZE)
        if self.logits.shape != expected:
            raise ValueError(f"logits shape {self.logits.shape} does not match density layout {expected}")

    @classmethod
    def zeros(cls, density: DensityAssignment, tau: float = DEFAULT_TEMPERATURE) -> "HeatmapField":
        n = int(density.level.sum())
        return cls(density, np.zeros((n, PATCH_SIZE, PATCH_SIZE)), tau)

    @property
    def origins(self) -> np.ndarray:
        px = self.density.patches_x
        return np.stack([(self.patch_index % px) * PATCH_SIZE,
                         (self.patch_index // px) * PATCH_SIZE], axis=-1).astype(np.float64)

    def __len__(self) -> int:
        return len(self.logits)


def primitive_layout(density: DensityAssignment):
    counts = density.level.reshape(-1)
    patch_index = np.repeat(np.arange(counts.size), counts)
    starts = np.cumsum(counts) - counts
    channel_index = np.arange(patch_index.size) - np.repeat(starts, counts)
    return patch_index, channel_index


@dataclass
class Detections:
    """2D primitive centers (global pixels) with their patch/channel provenance."""

    xy: np.ndarray
    patch_index: np.ndarray
    channel_index: np.ndarray

    def __len__(self) -> int:
        return len(self.xy)


def detect_all(field: HeatmapField) -> tuple[Detections, np.ndarray]:
    """Run softmax + DSNT on every primitive. Returns detections and heatmaps."""
    h = spatial_softmax(field.logits, field.tau)
    x, y = dsnt(h, field.origins)
    return Detections(np.stack([x, y], -1), field.patch_index, field.channel_index), h


def detect_backward(field: HeatmapField, heatmaps: np.ndarray, grad_xy: np.ndarray) -> np.ndarray:
    return dsnt_backward(heatmaps, field.origins, grad_xy, field.tau)


def pixel_grid_detections(width: int, height: int) -> Detections:
    """One fixed detection per pixel center (the pixel-aligned baseline)."""
    xs, ys = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    xy = np.stack([xs.reshape(-1), ys.reshape(-1)], -1)
    px = width // PATCH_SIZE
    col, row = (xs.reshape(-1) // PATCH_SIZE).astype(int), (ys.reshape(-1) // PATCH_SIZE).astype(int)
    return Detections(xy, row * max(px, 1) + col, np.zeros(len(xy), dtype=np.int64))


def mean_heatmaps(field: HeatmapField) -> dict:
    """Average activation of each channel over all patches, keyed by density level."""
    h = spatial_softmax(field.logits, field.tau)
    levels = field.density.level.reshape(-1)[field.patch_index]
    out = {}
    for lv in np.unique(levels):
        sel = levels == lv
        ch = field.channel_index[sel]
        sums = np.zeros((lv, PATCH_SIZE, PATCH_SIZE))
        np.add.at(sums, ch, h[sel])
        out[int(lv)] = sums / np.bincount(ch, minlength=lv)[:, None, None]
    return out
