"""Self-supervised fitting of the decoder's free fields to a set of input views.

At this scale the detection logits, descriptor fields and the MLP are the
optimization variables; geometry (cameras, depth maps) comes from the scene
bundle and stays fixed unless ``optimize_depth`` is set.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import aggregate
from .core import GaussianModel, SceneBundle
from .decode import (GaussianGrads, MlpWeights, ScaleBounds, decode_view, decode_view_backward)
from .density import DensityAssignment, image_density, primitive_budget
from .detection import (DEFAULT_TEMPERATURE, HeatmapField, detect_all, detect_backward,
                        pixel_grid_detections)
from .losses import LOSS_NAMES, LossWeights, ViewTerms, total_loss
from .metrics import psnr
from .rasterizer import render, render_backward

logger = logging.getLogger(__name__)

MODES = ("detection", "detection-fixed-density", "pixel-aligned")
MODE_ALIASES = {"fixed-density": "detection-fixed-density", "pixel": "pixel-aligned",
                "adaptive": "detection"}


class DivergenceError(RuntimeError):
    def __init__(self, message, state=None, breakdown=None):
        super().__init__(message)
        self.state = state
        self.breakdown = breakdown


@dataclass
class FitConfig:
    steps: int = 200
    mode: str = "detection"
    seed: int = 0
    lr_logits: float = 1e-2
    lr_desc: float = 1e-2
    lr_mlp: float = 1e-3
    lr_depth: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = DEFAULT_TEMPERATURE
    s_min: float = 1e-4
    s_max: float = 0.05
    prune_threshold: float = 0.1
    use_confidence: bool = True
    optimize_depth: bool = False
    descriptor_dim: int = 32
    hidden: int = 64
    desc_init_std: float = 0.01
    mlp_init_std: float = 0.1
    logit_init_std: float = 0.0
    log_every: int = 0

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    @property
    def bounds(self) -> ScaleBounds:
        return ScaleBounds(self.s_min, self.s_max)

    def lr_for(self, key: str) -> float:
        return {"logits": self.lr_logits, "desc": self.lr_desc, "mlp": self.lr_mlp,
                "depth": self.lr_depth}[key.split("/")[0]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown fit config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitState:
    fields: list
    desc: list
    mlp: MlpWeights
    depth: list
    moments: dict
    step: int = 0

    def params(self) -> dict:
        p = {}
        for i, f in enumerate(self.fields):
            if f is not None:
                p[f"logits/{i}"] = f.logits
        for i, d in enumerate(self.desc):
            p[f"desc/{i}"] = d
        for name, arr in zip(("W1", "b1", "W2", "b2"), self.mlp.arrays()):
            p[f"mlp/{name}"] = arr
        for i, d in enumerate(self.depth):
            p[f"depth/{i}"] = d
        return p

    def copy(self) -> "FitState":
        return copy.deepcopy(self)


def densities_for(bundle: SceneBundle, mode: str) -> list:
    return [image_density(img, adaptive=(mode == "detection")) for img in bundle.images]


def init_state(bundle: SceneBundle, density=None, seed: int = 0, config: FitConfig = None) -> FitState:
    """Fresh state: zero logits (every detection at its patch center), small random fields.

    ``density`` may be one :class:`DensityAssignment` shared by all views, a
    per-view list, or ``None`` to derive it from the images per ``config.mode``.
    """
    config = config or FitConfig(seed=seed)
    rng = np.random.default_rng(seed)
    if config.mode == "pixel-aligned":
        fields_ = [None] * len(bundle)
    else:
        if density is None:
            density = densities_for(bundle, config.mode)
        elif isinstance(density, DensityAssignment):
            density = [density] * len(bundle)
        fields_ = []
        for dens in density:
            hf = HeatmapField.zeros(dens, config.tau)
            if config.logit_init_std:
                hf.logits = rng.normal(0.0, config.logit_init_std, hf.logits.shape)
            fields_.append(hf)
    desc = [rng.normal(0.0, config.desc_init_std, img.shape[:2] + (config.descriptor_dim,))
            for img in bundle.images]
    mlp = MlpWeights.init(rng, config.descriptor_dim, config.hidden, config.mlp_init_std)
    depth = [dm.depth.copy() for dm in bundle.depths] if config.optimize_depth else []
    return FitState(fields_, desc, mlp, depth, {}, 0)


# -- forward / backward -----------------------------------------------------------------------


@dataclass
class ViewForward:
    detections: object
    heatmaps: np.ndarray
    cam_model: GaussianModel
    cache: object
    n_detections: int


def _view_depth(state: FitState, bundle: SceneBundle, i: int) -> np.ndarray:
    return state.depth[i] if state.depth else bundle.depths[i].depth


def decode_all(state: FitState, bundle: SceneBundle, config: FitConfig):
    views = []
    world = []
    for i, (img, cam) in enumerate(zip(bundle.images, bundle.cameras)):
        hf = state.fields[i]
        if hf is None:
            det, heat = pixel_grid_detections(cam.width, cam.height), None
        else:
            det, heat = detect_all(hf)
        m, cache = decode_view(det, _view_depth(state, bundle, i), img, state.desc[i], state.mlp,
                               cam, config.bounds)
        views.append(ViewForward(det, heat, m, cache, len(det)))
        world.append(aggregate.to_world(m, cam))
    return views, aggregate.fuse(world, training=True)


def forward_backward(state: FitState, bundle: SceneBundle, config: FitConfig, need_grads: bool = True):
    """Evaluate the total loss and (optionally) its gradient wrt every parameter."""
    views, model = decode_all(state, bundle, config)
    n_views = len(bundle)
    terms, renders = [], []
    for i, (img, cam) in enumerate(zip(bundle.images, bundle.cameras)):
        sel = np.nonzero(model.source_view == i)[0]
        self_out = render(model.subset(sel), cam, use_confidence=False)
        full_out = render(model, cam, use_confidence=config.use_confidence)
        renders.append((sel, self_out, full_out))
        td = bundle.teacher_depths[i]
        tconf = np.where(np.isfinite(td.depth), td.confidence, 0.0)
        terms.append(ViewTerms(img, self_out[0], full_out[0], _view_depth(state, bundle, i), cam,
                               np.where(np.isfinite(td.depth), td.depth, 0.0), tconf,
                               bundle.teacher_cameras[i]))
    alpha = model.opacities
    conf = model.confidences if config.use_confidence else np.ones(len(model))
    total, parts, lg = total_loss(terms, alpha, conf, config.weights)
    parts["psnr"] = float(np.mean([psnr(t.self_render.color, t.image) for t in terms]))
    parts["psnr_full"] = float(np.mean([psnr(t.full_render.color, t.image) for t in terms]))
    parts["n_primitives"] = len(model)
    if not need_grads:
        return total, parts, None, (views, model, renders)
    g = GaussianGrads.zeros(len(model))
    g.opacities += lg.alpha
    if config.use_confidence:
        g.confidences += lg.conf
    for i, cam in enumerate(bundle.cameras):
        sel, (s_out, s_spl, s_cache), (f_out, f_spl, f_cache) = renders[i]
        sub = model.subset(sel)
        gs, _ = render_backward(sub, cam, s_out, s_spl, s_cache, lg.self_render[i])
        for name in ("means", "scales", "rotations", "opacities", "confidences", "colors"):
            getattr(g, name)[sel] += getattr(gs, name)
        gf, _ = render_backward(model, cam, f_out, f_spl, f_cache, lg.full_render[i])
        for name in ("means", "scales", "rotations", "opacities", "confidences", "colors"):
            getattr(g, name)[:] += getattr(gf, name)
    grads = {}
    g_mlp = MlpWeights.zeros_like(state.mlp)
    for i, (img, cam) in enumerate(zip(bundle.images, bundle.cameras)):
        sel = np.nonzero(model.source_view == i)[0]
        gc = aggregate.to_world_backward(g.subset(sel), cam)
        v = views[i]
        depth = _view_depth(state, bundle, i)
        g_xy, g_desc, g_m, g_depth = decode_view_backward(v.cache, gc, depth, img, state.desc[i],
                                                          state.mlp, cam, config.bounds)
        for acc, part in zip(g_mlp.arrays(), g_m.arrays()):
            acc += part
        grads[f"desc/{i}"] = g_desc
        if state.fields[i] is not None:
            grads[f"logits/{i}"] = detect_backward(state.fields[i], v.heatmaps, g_xy)
        if state.depth:
            grads[f"depth/{i}"] = g_depth + lg.depth[i]
    for name, arr in zip(("W1", "b1", "W2", "b2"), g_mlp.arrays()):
        grads[f"mlp/{name}"] = arr
    return total, parts, grads, (views, model, renders)


def _adam(state: FitState, grads: dict, config: FitConfig) -> FitState:
    new = state.copy()
    new.step = state.step + 1
    t = new.step
    params = new.params()
    for key, g in grads.items():
        lr = config.lr_for(key)
        m, v = new.moments.get(key, (np.zeros_like(g), np.zeros_like(g)))
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        new.moments[key] = (m, v)
        if lr == 0:
            continue
        mhat = m / (1 - config.beta1 ** t)
        vhat = v / (1 - config.beta2 ** t)
        params[key] -= lr * mhat / (np.sqrt(vhat) + config.eps)
    if new.depth:
        # keep optimized depth strictly positive
        for d in new.depth:
            np.maximum(d, 1e-4, out=d)
    return new


def step(state: FitState, bundle: SceneBundle, config: FitConfig, lr_scale: float = 1.0):
    """One forward/backward/Adam update. Returns ``(new_state, breakdown)``."""
    total, parts, grads, _ = forward_backward(state, bundle, config)
    if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError(f"non-finite loss at step {state.step}", state, parts)
    if lr_scale != 1.0:
        config = copy.copy(config)
        for name in ("lr_logits", "lr_desc", "lr_mlp", "lr_depth"):
            setattr(config, name, getattr(config, name) * lr_scale)
    new = _adam(state, grads, config)
    if not all(np.all(np.isfinite(p)) for p in new.params().values()):
        raise DivergenceError(f"non-finite parameters after step {state.step}", state, parts)
    return new, parts


def build_model(state: FitState, bundle: SceneBundle, config: FitConfig, training: bool = False) -> GaussianModel:
    """Decode, aggregate and (unless ``training``) prune the current state."""
    _, model = decode_all(state, bundle, config)
    if not config.use_confidence:
        model.confidences = np.ones(len(model))
    if training:
        return model
    return model.subset(aggregate.prune_mask(model, config.prune_threshold))


def detections(state: FitState, bundle: SceneBundle, config: FitConfig) -> list:
    views, _ = decode_all(state, bundle, config)
    return [v.detections for v in views]


@dataclass
class FitResult:
    model: GaussianModel
    trace: list
    state: FitState
    final: dict


def evaluate_state(state: FitState, bundle: SceneBundle, config: FitConfig) -> dict:
    """Loss breakdown and PSNRs of ``state`` without updating it."""
    _, parts, _, _ = forward_backward(state, bundle, config, need_grads=False)
    return parts


def fit(bundle: SceneBundle, config: FitConfig = None, state: FitState = None, callback=None) -> FitResult:
    """Run ``config.steps`` updates and return the pruned model plus a per-step trace."""
    config = config or FitConfig()
    state = state or init_state(bundle, seed=config.seed, config=config)
    trace = []
    for k in range(config.steps):
        try:
            state, parts = step(state, bundle, config)
        except DivergenceError:
            logger.error("fit diverged at step %d", k)
            raise
        row = {"step": k, **{n: parts[n] for n in LOSS_NAMES}, "total": parts["total"],
               "psnr": parts["psnr"], "psnr_full": parts["psnr_full"],
               "n_primitives": parts["n_primitives"]}
        trace.append(row)
        if config.log_every and k % config.log_every == 0:
            logger.info("step=%d " + " ".join(f"{n}=%.5g" for n in LOSS_NAMES) + " psnr=%.3f",
                        k, *[parts[n] for n in LOSS_NAMES], parts["psnr"])
        if callback is not None:
            callback(k, state, parts)
    final = evaluate_state(state, bundle, config)
    return FitResult(build_model(state, bundle, config), trace, state, final)


def budget(bundle: SceneBundle, mode: str) -> int:
    """Total primitives per scene for a fitting mode, before pruning."""
    mode = MODE_ALIASES.get(mode, mode)
    if mode == "pixel-aligned":
        return sum(img.shape[0] * img.shape[1] for img in bundle.images)
    return sum(primitive_budget(d) for d in densities_for(bundle, mode))
