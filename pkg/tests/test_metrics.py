import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offgrid.core import Camera, DegenerateError, axis_angle_matrix
from offgrid.metrics import (PSNR_SENTINEL, REPORT_KEYS, align_cameras, depth_metrics, focal_metrics, fov_deg,
                             metrics_report, pair_errors, pose_auc, psnr, relative_pose_errors, ssim_metric,
                             umeyama)

from conftest import random_rotation


def rig(rng, n=4):
    cams = []
    for _ in range(n):
        R = random_rotation(rng)
        cams.append(Camera(60.0, 60.0, 32.0, 32.0, R, rng.normal(size=3), 64, 64))
    return cams


def similarity(cams, s, Q, d):
    """The same rig after moving the world by x -> s * Q @ x + d."""
    out = []
    for c in cams:
        R = c.R @ Q.T
        out.append(c.replace(R=R, t=-R @ (s * Q @ c.center + d)))
    return out


class TestImage:
    def test_psnr_sentinel(self, rng):
        x = rng.uniform(size=(8, 8, 3))
        assert psnr(x, x) == PSNR_SENTINEL

    def test_psnr_20db(self, rng):
        x = rng.uniform(0, 0.9, (8, 8, 3))
        np.testing.assert_allclose(psnr(x + 0.1, x), 20.0, atol=1e-9)

    def test_psnr_oracle(self, rng):
        x, y = rng.uniform(size=(9, 7, 3)), rng.uniform(size=(9, 7, 3))
        mse = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size
        np.testing.assert_allclose(psnr(x, y), -10 * math.log10(mse))

    def test_psnr_shape(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_ssim_identical(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        np.testing.assert_allclose(ssim_metric(x, x), 1.0)

    def test_ssim_constants(self):
        # constants a, b away from the zero-padded border: variance terms vanish,
        # SSIM reduces to the luminance term (2ab + C1) / (a^2 + b^2 + C1)
        a, b = np.full((40, 40), 0.3), np.full((40, 40), 0.7)
        from offgrid.losses import ssim_map
        S = ssim_map(a, b)[0][15:25, 15:25]
        C1 = 0.01 ** 2
        np.testing.assert_allclose(S, (2 * 0.21 + C1) / (0.09 + 0.49 + C1), rtol=1e-9)
        assert ssim_metric(a, b) < 1

    def test_ssim_symmetric(self, rng):
        x, y = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        assert ssim_metric(x, y) == pytest.approx(ssim_metric(y, x), abs=1e-14)


class TestPose:
    def test_identical(self, rng):
        cams = rig(rng)
        rot, trans, excluded = relative_pose_errors(cams, cams)
        assert len(rot) == 12 and excluded == 0
        assert not rot.any() and not trans.any()

    def test_global_similarity_invariant(self, rng):
        cams = rig(rng)
        moved = similarity(cams, 2.5, random_rotation(rng), rng.normal(size=3))
        rot, trans, _ = relative_pose_errors(moved, cams)
        np.testing.assert_allclose(rot, 0, atol=1e-9)
        np.testing.assert_allclose(trans, 0, atol=1e-9)
        assert pose_auc(pair_errors(moved, cams), 15) == pytest.approx(1.0)

    def test_one_camera_rotated(self, rng):
        cams = rig(rng, 3)
        bad = list(cams)
        bad[1] = cams[1].replace(R=axis_angle_matrix(np.array([0, 1.0, 0]), math.radians(10)) @ cams[1].R)
        rot, _, _ = relative_pose_errors(bad, cams)
        pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
        for (i, j), r in zip(pairs, rot):
            np.testing.assert_allclose(r, 10.0 if 1 in (i, j) else 0.0, atol=1e-5)

    def test_zero_baseline_excluded(self, rng):
        cams = rig(rng, 2)
        cams[1] = cams[1].replace(t=cams[1].R @ cams[0].center * -1)
        _, trans, excluded = relative_pose_errors(cams, cams)
        assert excluded == 2 and np.all(np.isnan(trans))

    def test_needs_two(self, rng):
        with pytest.raises(ValueError):
            relative_pose_errors(rig(rng, 1), rig(rng, 1))

    @pytest.mark.parametrize("errors,threshold,expected", [
        ([0.0, 0.0], 15, 1.0), ([0.0], 30, 1.0), ([16.0, 40.0], 15, 0.0), ([31.0], 30, 0.0),
        ([7.5], 15, 0.5)])
    def test_auc_examples(self, errors, threshold, expected):
        assert pose_auc(errors, threshold) == pytest.approx(expected, abs=1e-12)

    def test_auc_matches_dense_integration(self, rng):
        errs = rng.uniform(0, 40, 9)
        x = np.linspace(0, 15, 150001)
        recall = np.mean(errs[None, :] <= x[:, None], axis=1)
        np.testing.assert_allclose(pose_auc(errs, 15), np.trapezoid(recall, x) / 15, atol=1e-4)

    def test_auc_empty(self):
        with pytest.raises(ValueError):
            pose_auc([], 15)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 60), min_size=1, max_size=20))
    def test_auc_bounds_and_monotone(self, errs):
        a15, a30 = pose_auc(errs, 15), pose_auc(errs, 30)
        assert 0 <= a15 <= 1 and 0 <= a30 <= 1
        assert pose_auc(np.array(errs) + 1.0, 15) <= a15 + 1e-12


class TestDepth:
    def test_identical(self, rng):
        d = rng.uniform(1, 3, (8, 8))
        assert depth_metrics(d, d) == (0.0, 1.0)

    def test_scaled_prediction(self, rng):
        d = rng.uniform(1, 3, (8, 8))
        absrel, delta = depth_metrics(1.25 * d, d)
        assert absrel == pytest.approx(0, abs=1e-12) and delta == 1.0

    def test_one_doubled_pixel(self, rng):
        n = 49
        g = rng.uniform(1, 3, (7, 7))
        p = g.copy()
        # doubling the largest value leaves the median, and thus the scaling, unchanged
        p[np.unravel_index(np.argmax(g), g.shape)] *= 2.0
        # one pixel with relative error 1, all others exact
        np.testing.assert_allclose(depth_metrics(p, g)[0], 1.0 / n)

    def test_mask_and_invalid(self, rng):
        g = rng.uniform(1, 3, (6, 6))
        p = g.copy()
        p[0, 0] = 100.0
        g[1, 1] = np.inf
        m = np.ones((6, 6), bool)
        m[0, 0] = False
        assert depth_metrics(p, g, m) == (0.0, 1.0)
        with pytest.raises(ValueError):
            depth_metrics(p, g, np.zeros((6, 6), bool))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100))
    def test_scale_invariant(self, k):
        rng = np.random.default_rng(5)
        g, p = rng.uniform(1, 3, (6, 6)), rng.uniform(1, 3, (6, 6))
        np.testing.assert_allclose(depth_metrics(k * p, g), depth_metrics(p, g), atol=1e-12)


class TestFocal:
    def test_identical(self, rng):
        cams = rig(rng)
        assert focal_metrics(cams, cams) == (0.0, 0.0, 1.0)

    def test_offset(self, rng):
        cams = rig(rng, 1)
        off = [cams[0].replace(fx=70.0, fy=70.0)]
        mae, fov, t3 = focal_metrics(off, cams)
        assert mae == 10.0
        np.testing.assert_allclose(fov, fov_deg(64, 60) - fov_deg(64, 70))

    def test_fov_direct(self):
        # angle between the rays through the left and right image edges
        W, f = 64.0, 50.0
        a = np.array([-W / 2, 0, f])
        b = np.array([W / 2, 0, f])
        direct = math.degrees(math.acos(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
        np.testing.assert_allclose(fov_deg(W, f), direct)


class TestUmeyama:
    def test_identity(self, rng):
        x = rng.normal(size=(10, 3))
        s, R, t = umeyama(x, x)
        np.testing.assert_allclose(s, 1.0)
        np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t, 0, atol=1e-12)

    def test_recovery(self, rng):
        for _ in range(20):
            x = rng.normal(size=(12, 3))
            R0, t0 = random_rotation(rng), rng.normal(size=3)
            s, R, t = umeyama(x, 2.0 * x @ R0.T + t0)
            np.testing.assert_allclose(s, 2.0, atol=1e-9)
            np.testing.assert_allclose(R, R0, atol=1e-9)
            np.testing.assert_allclose(t, t0, atol=1e-9)
            assert np.linalg.det(R) == pytest.approx(1.0)

    def test_reflection_rejected(self, rng):
        x = rng.normal(size=(10, 3))
        s, R, t = umeyama(x, x * [1, 1, -1])
        assert np.linalg.det(R) == pytest.approx(1.0)

    def test_degenerate(self, rng):
        with pytest.raises(DegenerateError):
            umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
        line = np.outer(np.arange(5.0), [1, 2, 3])
        with pytest.raises(DegenerateError):
            umeyama(line, line)

    def test_locally_minimal(self, rng):
        x = rng.normal(size=(15, 3))
        y = 1.5 * x @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(0, 0.05, (15, 3))
        s, R, t = umeyama(x, y)

        def rms(s_, R_, t_):
            return np.sqrt(np.mean(np.sum((s_ * x @ R_.T + t_ - y) ** 2, axis=1)))

        best = rms(s, R, t)
        for _ in range(30):
            dR = axis_angle_matrix(rng.normal(size=3), 1e-3)
            assert rms(s * (1 + rng.normal(0, 1e-3)), dR @ R, t + rng.normal(0, 1e-3, 3)) > best

    def test_align_cameras(self, rng):
        cams = rig(rng, 5)
        moved = similarity(cams, 0.4, random_rotation(rng), rng.normal(size=3))
        for a, b in zip(align_cameras(moved, cams), cams):
            np.testing.assert_allclose(a.R, b.R, atol=1e-9)
            np.testing.assert_allclose(a.t, b.t, atol=1e-9)


class TestReport:
    def test_keys_and_perfect(self, rng):
        cams = rig(rng, 3)
        imgs = [rng.uniform(size=(16, 16, 3)) for _ in cams]
        deps = [rng.uniform(1, 2, (16, 16)) for _ in cams]
        r = metrics_report(imgs, imgs, cams, cams, deps, deps)
        assert tuple(r) == REPORT_KEYS
        assert r["psnr"] == PSNR_SENTINEL and r["auc15"] == pytest.approx(1) and r["absrel"] == 0

    def test_absent_inputs(self, rng):
        cams = rig(rng, 1)
        r = metrics_report(None, None, cams, cams)
        assert r["psnr"] is None and r["auc15"] is None and r["t3"] == 1.0
