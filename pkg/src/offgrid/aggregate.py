"""Camera-to-world transforms and confidence-weighted multi-view fusion."""

from __future__ import annotations

import numpy as np

from .core import Camera, GaussianModel, matrix_to_quat, quat_left_matrix, quat_multiply
from .decode import GaussianGrads

DEFAULT_PRUNE_THRESHOLD = 0.1


def to_world(g: GaussianModel, cam: Camera) -> GaussianModel:
    """Move camera-frame Gaussians into the world frame of ``cam``."""
    q_rt = matrix_to_quat(cam.R.T)
    means = (g.means - cam.t) @ cam.R
    rots = quat_multiply(q_rt, g.rotations)
    return GaussianModel(means, g.scales, rots, g.opacities, g.confidences, g.colors,
                         g.source_view, g.n_views)


def to_world_backward(grads: GaussianGrads, cam: Camera) -> GaussianGrads:
    L = quat_left_matrix(matrix_to_quat(cam.R.T))
    return GaussianGrads(grads.means @ cam.R.T, grads.scales, grads.rotations @ L,
                         grads.opacities, grads.confidences, grads.colors)


def concatenate(models: list) -> GaussianModel:
    """Stack per-view world-frame models, tagging each primitive with its view index."""
    n_views = len(models)
    if not models or sum(len(m) for m in models) == 0:
        return GaussianModel.empty(max(n_views, 1))
    cat = lambda name: np.concatenate([getattr(m, name) for m in models])
    src = np.concatenate([np.full(len(m), i, dtype=np.int64) for i, m in enumerate(models)])
    return GaussianModel(cat("means"), cat("scales"), cat("rotations"), cat("opacities"),
                         cat("confidences"), cat("colors"), src, n_views)


def prune_mask(model: GaussianModel, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> np.ndarray:
    """Boolean mask of primitives that survive (``opacity * confidence >= threshold``)."""
    if not (0.0 <= threshold < 1.0):
        raise ValueError("prune threshold must lie in [0, 1)")
    return model.effective_opacities >= threshold


def fuse(models: list, prune_threshold: float = DEFAULT_PRUNE_THRESHOLD,
         training: bool = False) -> GaussianModel:
    """Fuse per-view world-frame models.

    The rendered opacity of the result is ``opacity * confidence``. In inference
    mode primitives below ``prune_threshold`` are removed; training mode keeps
    every primitive so that confidences still receive gradients.
    """
    merged = concatenate(models)
    if training:
        return merged
    return merged.subset(prune_mask(merged, prune_threshold))
