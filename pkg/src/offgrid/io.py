"""Reading and writing models, images, depth maps, cameras and scene bundles."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, DepthMap, GaussianModel, SceneBundle

SH_C0 = 0.28209479177387814
PLY_PROPERTIES = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                  "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2",
              "int16": "i2", "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4",
              "uint": "u4", "uint32": "u4", "float": "f4", "float32": "f4", "double": "f8",
              "float64": "f8"}


class MalformedPlyError(ValueError):
    pass


def _logit(p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


def export_ply(model: GaussianModel, path) -> None:
    """Write a binary little-endian PLY in the standard 3DGS vertex layout.

    The stored opacity is the logit of the fused opacity ``alpha * confidence``;
    scales are stored as natural logs and colors as degree-0 SH coefficients.
    """
    n = len(model)
    data = np.zeros(n, dtype=[(p, "<f4") for p in PLY_PROPERTIES])
    data["x"], data["y"], data["z"] = model.means.T
    dc = (model.colors - 0.5) / SH_C0
    data["f_dc_0"], data["f_dc_1"], data["f_dc_2"] = dc.T
    data["opacity"] = _logit(model.effective_opacities)
    log_s = np.log(model.scales)
    data["scale_0"], data["scale_1"], data["scale_2"] = log_s.T
    for i in range(4):
        data[f"rot_{i}"] = model.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc}") from exc


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise MalformedPlyError("missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise MalformedPlyError("unterminated header")
        tok = line.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) != 3:
                raise MalformedPlyError(f"bad format line: {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedPlyError(f"bad element line: {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedPlyError("property before any element")
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise MalformedPlyError(f"unsupported property line: {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise MalformedPlyError(f"unexpected header line: {line!r}")
    if fmt != "binary_little_endian":
        raise MalformedPlyError(f"unsupported PLY format {fmt!r}")
    return elements


def import_ply(path) -> GaussianModel:
    """Read a PLY written by :func:`export_ply` (or any 3DGS-layout file)."""
    path = Path(path)
    with open(path, "rb") as fh:
        elements = _parse_header(fh)
        if not elements or elements[0][0] != "vertex":
            raise MalformedPlyError("first element must be 'vertex'")
        _, n, props = elements[0]
        names = [p for p, _ in props]
        missing = [p for p in PLY_PROPERTIES if p not in names]
        if missing:
            raise MalformedPlyError(f"missing properties: {missing}")
        if len(set(names)) != len(names):
            raise MalformedPlyError("duplicate property names")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        buf = fh.read(dtype.itemsize * n)
        if len(buf) != dtype.itemsize * n:
            raise MalformedPlyError("truncated vertex data")
    v = np.frombuffer(buf, dtype=dtype)
    col = lambda *ks: np.stack([v[k].astype(np.float64) for k in ks], -1)
    means = col("x", "y", "z")
    colors = col("f_dc_0", "f_dc_1", "f_dc_2") * SH_C0 + 0.5
    opac = 1.0 / (1.0 + np.exp(-v["opacity"].astype(np.float64)))
    scales = np.exp(col("scale_0", "scale_1", "scale_2"))
    rots = col("rot_0", "rot_1", "rot_2", "rot_3")
    return GaussianModel(means, scales, rots, opac, np.ones(n), colors, np.zeros(n, dtype=np.int64))


# -- images and depth ---------------------------------------------------------------


def write_image(path, img: np.ndarray) -> None:
    """Write an 8-bit PNG or PPM (by extension) from a float image in [0, 1]."""
    path = Path(path)
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm", ".pnm") else "PNG"
    try:
        Image.fromarray(arr).save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray, scale: float = None) -> float:
    """Write depth as a 16-bit PNG plus a ``.json`` sidecar holding the scale.

    Stored value ``k`` decodes to depth ``k * scale``; ``0`` marks invalid
    (non-finite or non-positive) depth. The default scale is one millimeter,
    coarsened if needed so the maximum depth fits in 16 bits.
    """
    path = Path(path)
    d = np.asarray(getattr(depth, "depth", depth), dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    if scale is None:
        dmax = float(d[valid].max()) if valid.any() else 0.0
        scale = max(1e-3, dmax / 65535.0)
    q = np.where(valid, np.clip(np.round(np.where(valid, d, 0.0) / scale), 1, 65535), 0)
    Image.fromarray(q.astype(np.uint16)).save(path, format="PNG")
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"scale": scale, "invalid": 0}, fh)
    return scale


def read_depth(path) -> np.ndarray:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        scale = float(json.load(fh)["scale"])
    with Image.open(path) as im:
        q = np.asarray(im).astype(np.float64)
    return np.where(q > 0, q * scale, np.inf)


def write_cameras(path, cams) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cams], fh, indent=1)


def read_cameras(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a list of cameras")
    return [Camera.from_dict(d) for d in data]


def parse_camera_ref(ref: str):
    """Split ``cameras.json#3`` into ``(path, 3)``; index defaults to 0."""
    path, _, idx = ref.partition("#")
    return path, int(idx) if idx else 0


def write_metrics_csv(path, rows: list) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0].keys())
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) if v not in ("", None) else None for k, v in row.items()}
                for row in csv.DictReader(fh)]


# -- scene bundles ---------------------------------------------------------------------------


def save_bundle(bundle: SceneBundle, root) -> None:
    """Layout: ``images/NNN.png``, ``depth/NNN.png``, ``cameras.json`` and a ``teacher/`` copy."""
    root = Path(root)
    for sub in ("images", "depth", "teacher/depth", "teacher/confidence"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, (img, dm, tdm) in enumerate(zip(bundle.images, bundle.depths, bundle.teacher_depths)):
        write_image(root / "images" / f"{i:03d}.png", img)
        write_depth(root / "depth" / f"{i:03d}.png", dm.depth)
        write_depth(root / "teacher" / "depth" / f"{i:03d}.png", tdm.depth)
        np.save(root / "teacher" / "confidence" / f"{i:03d}.npy", tdm.confidence)
    write_cameras(root / "cameras.json", bundle.cameras)
    write_cameras(root / "teacher" / "cameras.json", bundle.teacher_cameras)
    if bundle.meta:
        with open(root / "meta.json", "w") as fh:
            json.dump(bundle.meta, fh, indent=1, sort_keys=True)


def load_bundle(root) -> SceneBundle:
    root = Path(root)
    if not (root / "cameras.json").is_file():
        raise FileNotFoundError(f"{root} is not a scene directory (no cameras.json)")
    cams = read_cameras(root / "cameras.json")
    n = len(cams)
    images = [read_image(root / "images" / f"{i:03d}.png") for i in range(n)]
    depths = [DepthMap(read_depth(root / "depth" / f"{i:03d}.png")) for i in range(n)]
    tdir = root / "teacher"
    if (tdir / "cameras.json").is_file():
        tcams = read_cameras(tdir / "cameras.json")
        tdepths = []
        for i in range(n):
            conf_path = tdir / "confidence" / f"{i:03d}.npy"
            conf = np.load(conf_path) if conf_path.is_file() else None
            tdepths.append(DepthMap(read_depth(tdir / "depth" / f"{i:03d}.png"), conf))
    else:
        tcams, tdepths = None, None
    meta = {}
    if (root / "meta.json").is_file():
        with open(root / "meta.json") as fh:
            meta = json.load(fh)
    return SceneBundle(images, cams, depths, tcams, tdepths, meta=meta)


def list_images(root) -> list:
    root = Path(root)
    return sorted(p for p in (root / "images").iterdir() if p.suffix.lower() in (".png", ".ppm"))


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
