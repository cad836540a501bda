"""Command-line entry point: ``offgrid synth|fit|render|eval``.

Exit codes: 0 success, 2 usage or input error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import SceneBundle

logger = logging.getLogger("offgrid")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def cmd_synth(args) -> int:
    from .synth import SceneSpec, generate

    spec = SceneSpec.from_dict(_load_json(args.spec))
    bundle = generate(spec)
    io.save_bundle(bundle, args.out)
    print(f"wrote {len(bundle)} views ({spec.width}x{spec.height}) to {args.out}")
    return EXIT_OK


def _write_predictions(model, bundle: SceneBundle, root) -> None:
    """Render every input camera and store images, median depth and cameras as a scene layout."""
    from .rasterizer import render

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(bundle.cameras):
        out = render(model, cam)[0]
        io.write_image(root / "images" / f"{i:03d}.png", out.color)
        io.write_depth(root / "depth" / f"{i:03d}.png", out.median_depth)
    io.write_cameras(root / "cameras.json", bundle.cameras)


def cmd_fit(args) -> int:
    from . import fit as fitmod
    from .detection import mean_heatmaps
    from .losses import LOSS_NAMES

    cfg_dict = _load_json(args.config) if args.config else {}
    if args.mode:
        cfg_dict["mode"] = args.mode
    if args.steps is not None:
        cfg_dict["steps"] = args.steps
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    config = fitmod.FitConfig.from_dict(cfg_dict)
    bundle = io.load_bundle(args.scene)
    state = fitmod.init_state(bundle, seed=config.seed, config=config)
    print(f"mode={config.mode} steps={config.steps} budget={fitmod.budget(bundle, config.mode)}")
    last = {"state": state}

    def keep(k, st, parts):
        last["state"] = st

    try:
        result = fitmod.fit(bundle, config, state=state, callback=keep)
    except fitmod.DivergenceError as exc:
        good = exc.state if exc.state is not None else last["state"]
        dump = Path(args.out).with_suffix(".diverged.ply")
        io.export_ply(fitmod.build_model(good, bundle, config), dump)
        print(f"error: {exc}; last finite state written to {dump}", file=sys.stderr)
        return EXIT_DIVERGED
    io.ensure_parent(args.out)
    io.export_ply(result.model, args.out)
    if args.trace:
        io.ensure_parent(args.trace)
        io.write_metrics_csv(args.trace, result.trace)
    final = result.final
    print(" ".join(f"{n}={final[n]:.6g}" for n in LOSS_NAMES + ("total",)))
    print(f"psnr_self={final['psnr']:.3f} psnr_full={final['psnr_full']:.3f}")
    print(f"primitives={final['n_primitives']} after_pruning={len(result.model)}")
    if args.pred_dir:
        _write_predictions(result.model, bundle, args.pred_dir)
    if args.figures:
        from . import plotting
        from .rasterizer import render

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        if result.trace:
            plotting.plot_trace(result.trace, fig_dir / "trace.png")
        dets = fitmod.detections(result.state, bundle, config)
        for i, cam in enumerate(bundle.cameras):
            out = render(result.model, cam)[0]
            plotting.plot_render_comparison(bundle.images[i], out.color, fig_dir / f"render_{i:03d}.png",
                                            dets[i].xy)
            hf = result.state.fields[i]
            if hf is not None:
                plotting.plot_mean_heatmaps(mean_heatmaps(hf), fig_dir / f"heatmaps_{i:03d}.png")
    return EXIT_OK


def cmd_render(args) -> int:
    from .rasterizer import render

    model = io.import_ply(args.model)
    path, idx = io.parse_camera_ref(args.camera)
    if not Path(path).is_file():
        raise UsageError(f"no such camera file: {path}")
    cams = io.read_cameras(path)
    if not 0 <= idx < len(cams):
        raise UsageError(f"camera index {idx} out of range ({len(cams)} cameras in {path})")
    out = render(model, cams[idx])[0]
    io.ensure_parent(args.out)
    io.write_image(args.out, out.color)
    if args.depth:
        io.write_depth(args.depth, out.median_depth)
    if args.normal:
        io.write_image(args.normal, np.where(out.alpha[..., None] > 0, 0.5 * (out.normal + 1.0), 0.0))
    if args.alpha:
        io.write_image(args.alpha, out.alpha)
    print(f"rendered {len(model)} primitives to {args.out}")
    return EXIT_OK


def _read_scene_parts(root):
    root = Path(root)
    if not (root / "cameras.json").is_file():
        raise UsageError(f"{root}: missing cameras.json")
    cams = io.read_cameras(root / "cameras.json")
    images = [io.read_image(root / "images" / f"{i:03d}.png") for i in range(len(cams))]
    depth_paths = [root / "depth" / f"{i:03d}.png" for i in range(len(cams))]
    depths = [io.read_depth(p) for p in depth_paths] if all(p.is_file() for p in depth_paths) else None
    return images, cams, depths


def cmd_eval(args) -> int:
    from .metrics import metrics_report

    p_img, p_cam, p_dep = _read_scene_parts(args.pred)
    g_img, g_cam, g_dep = _read_scene_parts(args.gt)
    if len(p_cam) != len(g_cam):
        raise UsageError(f"view count mismatch: {len(p_cam)} predicted vs {len(g_cam)} ground truth")
    if p_dep is None or g_dep is None:
        p_dep = g_dep = None
    report = metrics_report(p_img, g_img, p_cam, g_cam, p_dep, g_dep)
    io.ensure_parent(args.report)
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=1)
    print(json.dumps(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offgrid", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit a Gaussian model to a scene directory")
    f.add_argument("--scene", required=True)
    f.add_argument("--config", default=None)
    f.add_argument("--out", required=True)
    f.add_argument("--trace", default=None)
    f.add_argument("--mode", default=None,
                   choices=["detection", "fixed-density", "pixel", "detection-fixed-density", "pixel-aligned"])
    f.add_argument("--steps", type=int, default=None)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--pred-dir", default=None, help="write renders of the fitted model here")
    f.add_argument("--figures", default=None, help="write report figures to this directory")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render a PLY model from a camera")
    r.add_argument("--model", required=True)
    r.add_argument("--camera", required=True, help="cameras.json#index")
    r.add_argument("--out", required=True)
    r.add_argument("--depth", default=None)
    r.add_argument("--normal", default=None)
    r.add_argument("--alpha", default=None)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="compare predicted and ground-truth scene directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba

        if args.threads < 1:
            parser.error("--threads must be >= 1")
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError, io.MalformedPlyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
