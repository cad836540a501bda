"""Entropy-driven primitive budgets for 14x14 image patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATCH_SIZE = 14
LOW, MEDIUM, HIGH = 16, 32, 64
LEVELS = (LOW, MEDIUM, HIGH)
LUMA = np.array([0.299, 0.587, 0.114])


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ LUMA


def patch_entropy(img: np.ndarray, patch_size: int = PATCH_SIZE, bins: int = 32) -> np.ndarray:
    """Shannon entropy (bits) of each patch's grayscale histogram.

    Returns an array of shape ``(H // patch_size, W // patch_size)``.
    """
    gray = luminance(img)
    h, w = gray.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {w}x{h} is not a multiple of {patch_size}")
    py, px = h // patch_size, w // patch_size
    idx = np.clip((gray * bins).astype(np.int64), 0, bins - 1)
    patches = idx.reshape(py, patch_size, px, patch_size).transpose(0, 2, 1, 3).reshape(py * px, -1)
    counts = np.zeros((py * px, bins))
    np.add.at(counts, (np.arange(py * px)[:, None], patches), 1.0)
    p = counts / patches.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=1)
    return np.abs(ent).reshape(py, px)


@dataclass(frozen=True)
class DensityAssignment:
    """Per-patch primitive counts (16, 32 or 64) on a ``patches_y x patches_x`` grid."""

    level: np.ndarray
    entropy: np.ndarray

    @property
    def patches_y(self) -> int:
        return self.level.shape[0]

    @property
    def patches_x(self) -> int:
        return self.level.shape[1]

    @property
    def n_patches(self) -> int:
        return self.level.size

    def counts(self) -> dict:
        return {lv: int(np.sum(self.level == lv)) for lv in LEVELS}


def split_counts(n: int) -> tuple[int, int, int]:
    """(low, medium, high) patch counts for ``n`` patches; remainder goes to high."""
    n_low = n * 55 // 100
    n_med = n * 35 // 100
    return n_low, n_med, n - n_low - n_med


def assign_density(entropy: np.ndarray) -> DensityAssignment:
    entropy = np.asarray(entropy, dtype=np.float64)
    if entropy.size < 1:
        raise ValueError("need at least one patch")
    flat = entropy.reshape(-1)
    order = np.argsort(flat, kind="stable")
    n_low, n_med, _ = split_counts(flat.size)
    level = np.full(flat.size, HIGH, dtype=np.int64)
    level[order[:n_low]] = LOW
    level[order[n_low:n_low + n_med]] = MEDIUM
    return DensityAssignment(level.reshape(entropy.shape), entropy)


def uniform_density(patches_y: int, patches_x: int, level: int = MEDIUM) -> DensityAssignment:
    """Fixed-density assignment (every patch gets ``level`` primitives)."""
    return DensityAssignment(np.full((patches_y, patches_x), level, dtype=np.int64),
                             np.zeros((patches_y, patches_x)))


def primitive_budget(a: DensityAssignment) -> int:
    return int(a.level.sum())


def image_density(img: np.ndarray, adaptive: bool = True) -> DensityAssignment:
    ent = patch_entropy(img)
    if adaptive:
        return assign_density(ent)
    return DensityAssignment(np.full(ent.shape, MEDIUM, dtype=np.int64), ent)
