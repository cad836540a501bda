import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offgrid.core import (BehindCameraError, Camera, DegenerateError, DepthMap, Gaussian, GaussianModel,
                          InvalidDepthError, SceneBundle, axis_angle_matrix, covariance3d, matrix_to_quat,
                          project, quat_multiply, quat_normalize, quat_to_matrix, rotation_angle, unproject)

from conftest import random_camera, random_rotation


def ident_cam(f=100.0, c=50.0, size=100):
    return Camera(f, f, c, c, np.eye(3), np.zeros(3), size, size)


class TestCamera:
    def test_invalid_focal(self):
        with pytest.raises(ValueError):
            Camera(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 14, 14)

    def test_too_small(self):
        with pytest.raises(ValueError):
            Camera(1.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 13, 14)

    def test_reflection_rejected(self):
        with pytest.raises(ValueError):
            Camera(1.0, 1.0, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 14, 14)

    def test_dict_round_trip(self, rng):
        cam = random_camera(rng)
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(back.R, cam.R)
        np.testing.assert_array_equal(back.t, cam.t)
        assert back.intrinsics.tolist() == cam.intrinsics.tolist()

    def test_look_at_points_at_target(self):
        cam = Camera.look_at([1.0, 2.0, -3.0], [0.0, 0.0, 0.0], [0, -1, 0], 50, 50, 28, 28)
        u, v, d = project(cam, np.zeros(3))
        np.testing.assert_allclose([u, v], [14.0, 14.0], atol=1e-12)
        np.testing.assert_allclose(d, math.sqrt(14.0), rtol=1e-12)

    def test_center(self, rng):
        cam = random_camera(rng)
        np.testing.assert_allclose(cam.R @ cam.center + cam.t, 0.0, atol=1e-12)


class TestProjection:
    def test_principal_ray(self):
        assert project(ident_cam(), [0.0, 0.0, 2.0]) == (50.0, 50.0, 2.0)

    def test_off_axis(self):
        np.testing.assert_allclose(project(ident_cam(), [0.5, 0.0, 1.0]), (100.0, 50.0, 1.0))

    def test_unproject_principal(self):
        np.testing.assert_allclose(unproject(ident_cam(), 50.0, 50.0, 3.0), [0.0, 0.0, 3.0])

    def test_unproject_off_axis(self):
        np.testing.assert_allclose(unproject(ident_cam(), 150.0, 50.0, 2.0), [2.0, 0.0, 2.0])

    @pytest.mark.parametrize("z", [0.0, -1.0, 1e-9])
    def test_behind_camera(self, z):
        with pytest.raises(BehindCameraError):
            project(ident_cam(), [0.0, 0.0, z])

    @pytest.mark.parametrize("d", [0.0, -2.0])
    def test_invalid_depth(self, d):
        with pytest.raises(InvalidDepthError):
            unproject(ident_cam(), 1.0, 1.0, d)

    def test_round_trips(self, rng):
        for _ in range(50):
            cam = random_camera(rng)
            u, v, d = rng.uniform(0, 28), rng.uniform(0, 28), rng.uniform(0.5, 5)
            np.testing.assert_allclose(project(cam, unproject(cam, u, v, d)), (u, v, d), atol=1e-9)
            p = unproject(cam, u, v, d)
            np.testing.assert_allclose(unproject(cam, *project(cam, p)), p, atol=1e-9)

    def test_vectorized(self, rng):
        cam = random_camera(rng)
        u, v, d = rng.uniform(0, 28, 10), rng.uniform(0, 28, 10), rng.uniform(1, 2, 10)
        P = unproject(cam, u, v, d)
        assert P.shape == (10, 3)
        np.testing.assert_allclose(np.stack(project(cam, P), -1), np.stack([u, v, d], -1), atol=1e-9)


class TestQuaternions:
    def test_identity(self):
        np.testing.assert_array_equal(quat_to_matrix([1.0, 0, 0, 0]), np.eye(3))

    def test_x90(self):
        c = math.cos(math.pi / 4)
        M = quat_to_matrix([c, c, 0, 0])
        np.testing.assert_allclose(M, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)

    def test_zero_norm(self):
        with pytest.raises(DegenerateError):
            quat_to_matrix([0.0, 0, 0, 0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
    def test_orthonormal(self, q):
        M = quat_to_matrix(np.array(q))
        np.testing.assert_allclose(M @ M.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(M) - 1) < 1e-12
        assert abs(np.linalg.norm(quat_normalize(np.array(q))) - 1) < 1e-9

    def test_matrix_quat_round_trip(self, rng):
        for _ in range(100):
            R = random_rotation(rng)
            np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)

    def test_multiply_composes(self, rng):
        p, q = quat_normalize(rng.normal(size=4)), quat_normalize(rng.normal(size=4))
        np.testing.assert_allclose(quat_to_matrix(quat_multiply(p, q)), quat_to_matrix(p) @ quat_to_matrix(q),
                                   atol=1e-12)

    def test_axis_angle(self):
        R = axis_angle_matrix([0, 0, 1.0], math.radians(30))
        assert abs(math.degrees(rotation_angle(R)) - 30) < 1e-12


class TestCovariance:
    def test_isotropic(self, rng):
        q = quat_normalize(rng.normal(size=4))
        np.testing.assert_allclose(covariance3d([0.3] * 3, q), 0.09 * np.eye(3), atol=1e-15)

    def test_diag(self):
        np.testing.assert_allclose(covariance3d([1.0, 2.0, 3.0], [1.0, 0, 0, 0]), np.diag([1.0, 4.0, 9.0]))

    def test_eigenvalues(self, rng):
        for _ in range(50):
            s = rng.uniform(0.01, 2, 3)
            S = covariance3d(s, quat_normalize(rng.normal(size=4)))
            np.testing.assert_allclose(S, S.T, atol=1e-15)
            np.testing.assert_allclose(np.linalg.eigvalsh(S), np.sort(s ** 2), atol=1e-9)


class TestContainers:
    def test_gaussian_validation(self):
        with pytest.raises(ValueError):
            Gaussian(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.array([1.0, 0, 0, 0]), 0.5, 0.5, np.zeros(3))
        with pytest.raises(ValueError):
            Gaussian(np.zeros(3), np.ones(3), np.array([1.0, 0, 0, 0]), 1.5, 0.5, np.zeros(3))

    def test_model_source_view_range(self):
        with pytest.raises(ValueError):
            GaussianModel(np.zeros((1, 3)), np.ones((1, 3)), [[1.0, 0, 0, 0]], [0.5], [1.0], np.zeros((1, 3)),
                          [1], n_views=1)

    def test_model_round_trip_gaussians(self, rng):
        gs = [Gaussian(rng.normal(size=3), rng.uniform(0.1, 1, 3), quat_normalize(rng.normal(size=4)),
                       0.3, 0.7, rng.uniform(0, 1, 3)) for _ in range(4)]
        m = GaussianModel.from_gaussians(gs)
        assert len(m) == 4
        np.testing.assert_array_equal(m[2].mean, gs[2].mean)
        np.testing.assert_allclose(m.effective_opacities, 0.21)
        assert len(GaussianModel.from_gaussians([])) == 0

    def test_depth_map(self):
        with pytest.raises(InvalidDepthError):
            DepthMap(np.array([[1.0, -1.0]]))
        dm = DepthMap(np.array([[1.0, np.inf]]))
        np.testing.assert_array_equal(dm.confidence, 1.0)

    def test_bundle_mismatch(self, rng):
        cam = random_camera(rng)
        img = np.zeros((28, 28, 3))
        with pytest.raises(ValueError):
            SceneBundle([img], [cam, cam], [DepthMap(np.ones((28, 28)))])
        with pytest.raises(ValueError):
            SceneBundle([img], [cam], [DepthMap(np.ones((14, 28)))])
