"""Evaluation metrics: image quality, relative pose AUC, depth, focal length, alignment."""

from __future__ import annotations

import logging
import math

import numpy as np

from .core import Camera, DegenerateError
from .losses import ssim

logger = logging.getLogger(__name__)

PSNR_SENTINEL = 99.0
REPORT_KEYS = ("psnr", "ssim", "auc15", "auc30", "absrel", "delta125", "focal_mae", "fov_err", "t3")


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; 99 dB if identical."""
    if np.shape(pred) != np.shape(target):
        raise ValueError("shape mismatch")
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - target) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * math.log10(1.0 / mse), PSNR_SENTINEL)


def ssim_metric(pred, target) -> float:
    return ssim(pred, target)


def _angle_between(a, b) -> float:
    # atan2 form stays accurate near 0 and 180 degrees, where acos loses half the digits
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b))))


def _rotation_angle(R) -> float:
    """Rotation angle of ``R`` in degrees."""
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.degrees(math.atan2(s, 0.5 * (np.trace(R) - 1.0)))


def relative_pose_errors(pred_cams, gt_cams, min_baseline: float = 1e-9):
    """Rotation and translation-direction errors (degrees) for every ordered pair.

    Returns ``(rot_err, trans_err, n_excluded)``. Pairs whose relative
    translation is too short to define a direction get ``nan`` translation
    error and are counted in ``n_excluded``.
    """
    if len(pred_cams) != len(gt_cams) or len(gt_cams) < 2:
        raise ValueError("need at least two cameras in each set, with equal counts")
    rot, trans = [], []
    excluded = 0
    for i in range(len(gt_cams)):
        for j in range(len(gt_cams)):
            if i == j:
                continue
            rel = []
            for cams in (pred_cams, gt_cams):
                Rij = cams[j].R @ cams[i].R.T
                rel.append((Rij, cams[j].t - Rij @ cams[i].t))
            (Rp, tp), (Rg, tg) = rel
            rot.append(_rotation_angle(Rp.T @ Rg))
            if np.linalg.norm(tp) < min_baseline or np.linalg.norm(tg) < min_baseline:
                excluded += 1
                trans.append(np.nan)
            else:
                trans.append(_angle_between(tp, tg))
    if excluded:
        logger.warning("%d camera pairs excluded from translation error (no baseline)", excluded)
    return np.array(rot), np.array(trans), excluded


def pose_auc(errors, threshold: float) -> float:
    """Normalized area under the recall curve of ``errors`` (deg) on [0, threshold].

    The recall curve is a step function, so the area has the closed form
    ``mean(max(0, 1 - e / threshold))``.
    """
    errors = np.asarray(errors, dtype=np.float64)
    errors = errors[np.isfinite(errors)]
    if errors.size == 0:
        raise ValueError("no errors to evaluate")
    return float(np.mean(np.clip(1.0 - errors / threshold, 0.0, 1.0)))


def pair_errors(pred_cams, gt_cams) -> np.ndarray:
    """Per-pair ``max(rotation, translation)`` error; pairs without a baseline use rotation only."""
    rot, trans, _ = relative_pose_errors(pred_cams, gt_cams)
    return np.where(np.isfinite(trans), np.maximum(rot, np.nan_to_num(trans)), rot)


def depth_metrics(pred, gt, mask=None):
    """``(AbsRel, delta<1.25)`` after median-scaling ``pred`` onto ``gt``."""
    pred = np.asarray(getattr(pred, "depth", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "depth", gt), dtype=np.float64)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(gt) & (gt > 0) & np.isfinite(pred) & (pred > 0)
    if not mask.any():
        raise ValueError("empty depth mask")
    p, g = pred[mask], gt[mask]
    p = p * (np.median(g) / np.median(p))
    absrel = float(np.mean(np.abs(p - g) / g))
    delta = float(np.mean(np.maximum(p / g, g / p) < 1.25))
    return absrel, delta


def fov_deg(width: float, focal: float) -> float:
    return math.degrees(2.0 * math.atan(width / (2.0 * focal)))


def focal_metrics(pred_cams, gt_cams, threshold_deg: float = 3.0):
    """``(MAE px, mean FoV error deg, fraction with FoV error < threshold)``."""
    if len(pred_cams) != len(gt_cams):
        raise ValueError("camera count mismatch")
    mae = [0.5 * (abs(p.fx - g.fx) + abs(p.fy - g.fy)) for p, g in zip(pred_cams, gt_cams)]
    fov = [abs(fov_deg(g.width, p.fx) - fov_deg(g.width, g.fx)) for p, g in zip(pred_cams, gt_cams)]
    return float(np.mean(mae)), float(np.mean(fov)), float(np.mean(np.array(fov) < threshold_deg))


def umeyama(src, dst, with_scale: bool = True):
    """Least-squares similarity ``dst ~ s * R @ src + t``. Returns ``(s, R, t)``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 3:
        raise DegenerateError("need at least 3 matching correspondences")
    n, m = src.shape
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.sum(xs ** 2) / n
    cov = xd.T @ xs / n
    U, d, Vt = np.linalg.svd(cov)
    if var_s < 1e-15 or np.linalg.matrix_rank(xs, tol=1e-9 * max(1.0, np.abs(xs).max())) < m - 1:
        raise DegenerateError("degenerate (collinear or coincident) point configuration")
    S = np.eye(m)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[-1, -1] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(d * np.diag(S)) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def align_cameras(pred_cams, gt_cams):
    """Similarity-align predicted camera centers onto ground truth (Umeyama)."""
    s, R, t = umeyama(np.array([c.center for c in pred_cams]), np.array([c.center for c in gt_cams]))
    out = []
    for c in pred_cams:
        Rn = c.R @ R.T
        center = s * R @ c.center + t
        out.append(c.replace(R=Rn, t=-Rn @ center))
    return out


def metrics_report(pred_images, gt_images, pred_cams, gt_cams, pred_depths=None, gt_depths=None,
                   depth_masks=None) -> dict:
    """Full metric suite keyed by :data:`REPORT_KEYS`; absent inputs give ``None``."""
    report = dict.fromkeys(REPORT_KEYS)
    if pred_images is not None:
        if len(pred_images) != len(gt_images):
            raise ValueError("image count mismatch")
        report["psnr"] = float(np.mean([psnr(p, g) for p, g in zip(pred_images, gt_images)]))
        report["ssim"] = float(np.mean([ssim_metric(p, g) for p, g in zip(pred_images, gt_images)]))
    if pred_cams is not None:
        if len(pred_cams) != len(gt_cams):
            raise ValueError("camera count mismatch")
        if len(gt_cams) >= 2:
            err = pair_errors(pred_cams, gt_cams)
            report["auc15"] = pose_auc(err, 15.0)
            report["auc30"] = pose_auc(err, 30.0)
        report["focal_mae"], report["fov_err"], report["t3"] = focal_metrics(pred_cams, gt_cams)
    if pred_depths is not None:
        if len(pred_depths) != len(gt_depths):
            raise ValueError("depth count mismatch")
        masks = depth_masks or [None] * len(gt_depths)
        vals = [depth_metrics(p, g, m) for p, g, m in zip(pred_depths, gt_depths, masks)]
        report["absrel"] = float(np.mean([v[0] for v in vals]))
        report["delta125"] = float(np.mean([v[1] for v in vals]))
    return report
