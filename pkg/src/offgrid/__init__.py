"""Desk-scale Gaussian splat decoder: sub-pixel primitive detection, decoding, rendering and fitting."""

from .core import Camera, DepthMap, GaussianModel, SceneBundle

__all__ = ["Camera", "DepthMap", "GaussianModel", "SceneBundle"]
__version__ = "0.1.0"
