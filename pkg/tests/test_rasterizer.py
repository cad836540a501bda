import numpy as np
import pytest

from offgrid.core import Camera, GaussianModel, quat_normalize
from offgrid.rasterizer import (ALPHA_MIN, DILATION, NonFiniteSplatError, RenderGrads, Splats, project_gaussians,
                                project_gaussians_backward, rasterize, rasterize_backward, render, self_render,
                                splat_radius)

from conftest import model_in_front, numeric_grad, random_camera, rel_err

W = H = 8


def random_splats(rng, n, width=W, height=H):
    c = rng.uniform(1, width - 1, (n, 2))
    L = rng.normal(0, 1, (n, 2, 2))
    cov = L @ L.transpose(0, 2, 1) + 0.8 * np.eye(2)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return Splats(c, np.stack([cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]], -1), rng.uniform(1, 3, n),
                  rng.uniform(0, 1, (n, 3)), rng.uniform(0.2, 0.9, n), nrm)


def single(center=(4.0, 4.0), cov=(2.0, 0.3, 1.5), opacity=0.6, color=(0.2, 0.5, 0.9), depth=2.0):
    return Splats(np.array([center], float), np.array([cov], float), np.array([depth]), np.array([color]),
                  np.array([opacity]), np.array([[0.0, 0.0, -1.0]]))


def gauss(px, py, center, cov):
    a, b, c = cov
    d = np.array([px - center[0], py - center[1]])
    C = np.linalg.inv(np.array([[a, b], [b, c]]))
    return float(np.exp(-0.5 * d @ C @ d))


class TestForward:
    def test_single_splat_closed_form(self):
        s = single()
        out = rasterize(s, W, H)
        for py in range(H):
            for px in range(W):
                a = 0.6 * gauss(px + 0.5, py + 0.5, (4.0, 4.0), (2.0, 0.3, 1.5))
                a = a if a >= ALPHA_MIN else 0.0
                np.testing.assert_allclose(out.alpha[py, px], a, atol=1e-6)
                np.testing.assert_allclose(out.color[py, px], a * np.array([0.2, 0.5, 0.9]), atol=1e-6)
                np.testing.assert_allclose(out.median_depth[py, px], 2.0 if a >= 0.5 else 0.0)

    def test_opaque_large(self):
        s = single(cov=(1e6, 0.0, 1e6), opacity=0.99999)
        out = rasterize(s, W, H)
        np.testing.assert_allclose(out.color, np.broadcast_to([0.2, 0.5, 0.9], (H, W, 3)), atol=1e-3)
        np.testing.assert_allclose(out.alpha, 1.0, atol=1e-3)
        np.testing.assert_array_equal(out.median_depth, 2.0)
        np.testing.assert_allclose(out.normal, np.broadcast_to([0, 0, -1.0], (H, W, 3)), atol=1e-12)

    def test_empty(self):
        out = rasterize(Splats.empty(), W, H)
        for buf in (out.color, out.alpha, out.median_depth, out.normal):
            assert not buf.any()

    def test_zero_opacity_is_empty(self, rng):
        s = random_splats(rng, 6)
        s.opacities[:] = 0.0
        out = rasterize(s, W, H)
        assert not out.color.any() and not out.alpha.any()

    def test_permutation_bitwise(self, rng):
        for _ in range(20):
            s = random_splats(rng, 7, 20, 20)
            out = rasterize(s, 20, 20)
            p = rasterize(s.take(rng.permutation(7)), 20, 20)
            for name in ("color", "alpha", "median_depth", "normal"):
                np.testing.assert_array_equal(getattr(out, name), getattr(p, name))

    def test_transmittance_monotone(self, rng):
        s = random_splats(rng, 8, 20, 20)
        order = np.argsort(s.depths)
        prev = np.zeros((20, 20))
        for k in range(1, 9):
            a = rasterize(s.take(order[:k]), 20, 20).alpha
            assert np.all(a >= prev - 1e-15) and np.all((a >= 0) & (a <= 1))
            prev = a

    def test_median_of_opaque(self):
        out = rasterize(single(cov=(9.0, 0.0, 9.0), opacity=0.999, depth=3.25), W, H)
        np.testing.assert_array_equal(out.median_depth[4, 4], 3.25)

    def test_translation_equivariant(self, rng):
        s = random_splats(rng, 5, 20, 20)
        out = rasterize(s, 20, 20)
        shifted = Splats(s.centers + [16.0, 32.0], s.cov2d, s.depths, s.colors, s.opacities, s.normals)
        big = rasterize(shifted, 52, 60)
        np.testing.assert_allclose(big.color[32:52, 16:36], out.color, atol=1e-12)

    def test_normals_unit(self, rng):
        out = rasterize(random_splats(rng, 6, 20, 20), 20, 20)
        n = np.linalg.norm(out.normal, axis=-1)
        assert np.all((np.abs(n - 1) < 1e-12) | (n == 0))

    def test_non_finite(self, rng):
        s = random_splats(rng, 2)
        s.centers[0, 0] = np.nan
        with pytest.raises(NonFiniteSplatError):
            rasterize(s, W, H)

    def test_radius_covers_skip_region(self, rng):
        s = random_splats(rng, 20, 40, 40)
        r = splat_radius(s.cov2d, s.opacities)
        for k in range(20):
            a, b, c = s.cov2d[k]
            lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
            # along the major axis at distance r the splat is below the skip threshold
            assert s.opacities[k] * np.exp(-0.5 * r[k] ** 2 / lam) <= ALPHA_MIN + 1e-12


class TestBackward:
    def _check(self, rng, n, tol):
        s = random_splats(rng, n)
        G = RenderGrads(rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)), rng.normal(size=(H, W)),
                        rng.normal(size=(H, W, 3)))

        def f():
            o = rasterize(s, W, H)
            return float(np.sum(o.color * G.color) + np.sum(o.alpha * G.alpha)
                         + np.sum(o.median_depth * G.median_depth) + np.sum(o.normal * G.normal))

        g = rasterize_backward(s, rasterize(s, W, H), G)
        worst = 0.0
        for name in ("centers", "cov2d", "depths", "colors", "opacities", "normals"):
            worst = max(worst, rel_err(getattr(g, name), numeric_grad(f, getattr(s, name), 1e-6)))
        return worst

    def test_finite_differences(self, rng):
        errs = [self._check(rng, int(rng.integers(1, 6)), 1e-4) for _ in range(100)]
        assert max(errs) < 1e-4

    def test_color_grad_is_weight(self):
        s = single()
        out = rasterize(s, W, H)
        gc = np.zeros((H, W, 3))
        gc[3, 5, 1] = 1.0
        g = rasterize_backward(s, out, RenderGrads(color=gc))
        np.testing.assert_allclose(g.colors[0], [0.0, out.alpha[3, 5], 0.0], atol=1e-15)

    def test_zero_upstream(self, rng):
        s = random_splats(rng, 4)
        g = rasterize_backward(s, rasterize(s, W, H), RenderGrads())
        for name in ("centers", "cov2d", "depths", "colors", "opacities", "normals"):
            assert not getattr(g, name).any()


class TestProjection:
    def test_isotropic_on_axis(self):
        cam = Camera(50.0, 50.0, 14.0, 14.0, np.eye(3), np.zeros(3), 28, 28)
        m = GaussianModel([[0, 0, 2.0]], [[0.04] * 3], [[1.0, 0, 0, 0]], [0.5], [1.0], [[1, 1, 1]])
        s, _ = project_gaussians(m, cam)
        v = (50 * 0.04 / 2.0) ** 2
        np.testing.assert_allclose(s.cov2d[0], [v + DILATION, 0.0, v + DILATION], atol=1e-12)
        np.testing.assert_allclose(s.centers[0], [14.0, 14.0])

    def test_behind_culled(self):
        cam = Camera(50.0, 50.0, 14.0, 14.0, np.eye(3), np.zeros(3), 28, 28)
        m = GaussianModel([[0, 0, -2.0], [0, 0, 2.0], [50.0, 0, 2.0]], [[0.04] * 3] * 3, [[1.0, 0, 0, 0]] * 3,
                          [0.5] * 3, [1.0] * 3, [[1, 1, 1]] * 3)
        s, cache = project_gaussians(m, cam)
        assert len(s) == 1 and cache.ids.tolist() == [1]

    def test_normal_faces_camera(self):
        cam = Camera(50.0, 50.0, 14.0, 14.0, np.eye(3), np.zeros(3), 28, 28)
        m = GaussianModel([[0, 0, 2.0]], [[0.05, 0.05, 0.001]], [[1.0, 0, 0, 0]], [0.5], [1.0], [[1, 1, 1]])
        s, _ = project_gaussians(m, cam)
        np.testing.assert_allclose(s.normals[0], [0, 0, -1.0])

    def test_isotropic_tie_uses_first_axis(self):
        cam = Camera(50.0, 50.0, 14.0, 14.0, np.eye(3), np.zeros(3), 28, 28)
        m = GaussianModel([[0.2, 0, 2.0]], [[0.05] * 3], [[1.0, 0, 0, 0]], [0.5], [1.0], [[1, 1, 1]])
        s, _ = project_gaussians(m, cam)
        np.testing.assert_allclose(np.abs(s.normals[0]), [1.0, 0, 0])

    def test_backward_finite_differences(self, rng):
        for _ in range(5):
            cam = random_camera(rng, 16, 16, 20.0)
            m = model_in_front(rng, cam, 4, scale=(0.05, 0.12))
            G = RenderGrads(rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16)), None,
                            rng.normal(size=(16, 16, 3)))

            def f(cam_=None):
                c = cam_ or cam
                o = rasterize(project_gaussians(m, c)[0], 16, 16)
                return float(np.sum(o.color * G.color) + np.sum(o.alpha * G.alpha) + np.sum(o.normal * G.normal))

            s, cache = project_gaussians(m, cam)
            gm, gcam = project_gaussians_backward(cache, rasterize_backward(s, rasterize(s, 16, 16), G), cam, 4)
            for name in ("means", "scales", "rotations", "opacities", "confidences", "colors"):
                assert rel_err(getattr(gm, name), numeric_grad(f, getattr(m, name), 1e-6)) < 1e-4, name
            t = np.array(cam.t)
            num_t = numeric_grad(lambda: f(cam.replace(t=t.copy())), t, 1e-6)
            assert rel_err(gcam.t, num_t) < 1e-4
            K = cam.intrinsics.copy()
            num_k = numeric_grad(lambda: f(cam.replace(fx=K[0], fy=K[1], cx=K[2], cy=K[3])), K, 1e-6)
            assert rel_err([gcam.fx, gcam.fy, gcam.cx, gcam.cy], num_k) < 1e-4


class TestSelfRender:
    def test_single_view(self, rng):
        cam = random_camera(rng, 32, 32)
        m = model_in_front(rng, cam, 10)
        forced = GaussianModel(m.means, m.scales, m.rotations, m.opacities, np.ones(10), m.colors)
        np.testing.assert_array_equal(self_render(m, 0, cam).color, render(forced, cam)[0].color)

    def test_empty_view(self, rng):
        cam = random_camera(rng, 32, 32)
        m = model_in_front(rng, cam, 5)
        m.n_views = 2
        assert not self_render(m, 1, cam).alpha.any()

    def test_full_differs(self, rng):
        cam = random_camera(rng, 32, 32)
        m = model_in_front(rng, cam, 10)
        m.n_views = 2
        m.source_view = np.array([0, 1] * 5)
        assert not np.allclose(self_render(m, 0, cam).color, render(m, cam)[0].color)
