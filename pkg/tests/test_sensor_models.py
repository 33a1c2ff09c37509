import json

import numpy as np
import pytest

from segcal import geometry as geo
from segcal import sensor_models as sm

rng = np.random.default_rng(77)


def random_calibration():
    return sm.CalibrationParams(
        camera=sm.CameraIntrinsics(250 + 10 * rng.random(2), np.array([318.0, 244.0]),
                                   0.9 + 0.05 * rng.random()),
        extrinsics=sm.CameraExtrinsics(geo.quat_exp(0.3 * rng.standard_normal(3)),
                                       0.05 * rng.standard_normal(3)),
        gyro=sm.GyroIntrinsics(1 + 0.01 * rng.standard_normal(3), 0.005 * rng.standard_normal(3)),
        accel=sm.AccelIntrinsics(1 + 0.02 * rng.standard_normal(3), 0.01 * rng.standard_normal(3),
                                 geo.quat_exp(0.03 * rng.standard_normal(3))),
    )


class TestTriadMatrix:
    def test_pack_unpack_roundtrip_exact(self):
        s, m = 1 + 0.1 * rng.standard_normal(3), 0.05 * rng.standard_normal(3)
        s2, m2 = sm.triad_params(sm.triad_matrix(s, m))
        assert np.array_equal(s, s2) and np.array_equal(m, m2)

    def test_upper_triangular(self):
        T = sm.triad_matrix([1.1, 1.2, 1.3], [0.01, 0.02, 0.03])
        assert T[1, 0] == T[2, 0] == T[2, 1] == 0.0
        assert np.linalg.det(T) > 0


class TestGyroModel:
    def test_identity_passthrough(self):
        out = sm.gyro_measure(np.array([0.1, 0, 0]), sm.GyroIntrinsics(), np.zeros(3))
        np.testing.assert_allclose(out, [0.1, 0, 0])

    def test_single_scale_row(self):
        intr = sm.GyroIntrinsics(s_g=np.array([1.01, 1.0, 1.0]))
        np.testing.assert_allclose(sm.gyro_measure(np.array([1.0, 0, 0]), intr, np.zeros(3)),
                                   [1.01, 0, 0])

    def test_matches_dense_matrix_product(self):
        intr = sm.GyroIntrinsics(1 + 0.1 * rng.random(3), 0.1 * rng.standard_normal(3))
        w = rng.standard_normal((5, 3))
        b = rng.standard_normal(3)
        ref = (intr.matrix() @ w.T).T + b
        np.testing.assert_allclose(sm.gyro_measure(w, intr, b), ref, atol=1e-14)

    def test_jacobian_wrt_bias_is_identity(self):
        J = sm.gyro_jacobians(rng.standard_normal(3), sm.GyroIntrinsics(), np.zeros(3))
        np.testing.assert_allclose(J["d_bg"], np.eye(3))

    def test_scale_validation(self):
        with pytest.raises(ValueError):
            sm.GyroIntrinsics(s_g=np.array([1.0, -1.0, 1.0]))


class TestAccelModel:
    def test_rest_measures_reaction_to_gravity(self):
        out = sm.accel_measure(np.zeros(3), geo.quat_identity(), sm.AccelIntrinsics(), np.zeros(3))
        np.testing.assert_allclose(out, [0, 0, 9.80665])

    def test_free_fall_measures_zero(self):
        out = sm.accel_measure(sm.GRAVITY_W, geo.quat_identity(), sm.AccelIntrinsics(), np.zeros(3))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_matches_matrix_chain_oracle(self):
        intr = sm.AccelIntrinsics(1 + 0.05 * rng.random(3), 0.05 * rng.standard_normal(3),
                                  geo.quat_exp(0.2 * rng.standard_normal(3)))
        q_ig = geo.quat_exp(rng.standard_normal(3))
        a_w = rng.standard_normal(3)
        b = rng.standard_normal(3)
        ref = intr.matrix() @ geo.quat_to_matrix(intr.q_ai) @ geo.quat_to_matrix(q_ig) \
            @ (a_w - sm.GRAVITY_W) + b
        np.testing.assert_allclose(sm.accel_measure(a_w, q_ig, intr, b), ref, atol=1e-12)


class TestFovDistortion:
    def test_zero_radius(self):
        assert sm.fov_distort(0.0, 0.92) == 0.0

    def test_small_w_taylor_limit(self):
        r = np.array([0.3, 1.0, 2.5])
        np.testing.assert_allclose(sm.fov_distort(r, 1e-9), r, atol=1e-9)

    def test_inverse_exact(self):
        for w in (0.92, 0.3, 1.2):
            r = np.array([0.0, 0.05, 0.4, 1.0, 3.0, 8.0])
            np.testing.assert_allclose(sm.fov_undistort(sm.fov_distort(r, w), w), r, atol=1e-10)


class TestProjection:
    def test_optical_axis_maps_to_principal_point(self):
        intr = sm.CameraIntrinsics()
        uv, valid = sm.project_cam(np.array([0.0, 0.0, 3.0]), intr)
        assert valid
        np.testing.assert_allclose(uv, intr.c)

    def test_small_w_equals_pinhole(self):
        intr = sm.CameraIntrinsics(w=1e-9)
        p = np.array([0.4, -0.3, 2.0])
        uv, _ = sm.project_cam(p, intr)
        pin = intr.f * p[:2] / p[2] + intr.c
        np.testing.assert_allclose(uv, pin, atol=1e-9)

    def test_behind_camera_flagged(self):
        _, valid = sm.project_cam(np.array([0.1, 0.1, -0.5]), sm.CameraIntrinsics())
        assert not valid
        _, valid = sm.project_cam(np.array([0.1, 0.1, 1e-9]), sm.CameraIntrinsics())
        assert not valid

    def test_backprojection_recovers_ray(self):
        intr = sm.CameraIntrinsics(np.array([254.5, 254.4]), np.array([317.5, 244.5]), 0.9222)
        for _ in range(30):
            p = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.2, 6)])
            uv, valid = sm.project_cam(p, intr)
            if not valid:
                continue
            ray = sm.backproject_ray(uv, intr)
            np.testing.assert_allclose(ray, p / np.linalg.norm(p), atol=1e-9)

    def test_full_transform_interface(self):
        calib = random_calibration()
        T_ig = geo.Transform(geo.quat_exp(rng.standard_normal(3)), rng.standard_normal(3))
        l = T_ig.inverse().t + geo.quat_rotate(geo.quat_inverse(T_ig.q), np.array([0.1, 0.2, 2.0]))
        uv, valid = sm.project(l, T_ig, sm.CameraExtrinsics(), calib.camera)
        assert uv.shape == (2,)


class TestModelJacobians:
    """Central finite differences for every measurement Jacobian block."""

    def test_projection_jacobian_wrt_principal_point_identity(self):
        calib = random_calibration()
        jac = sm.project_jacobians(np.array([1.0, 0.5, 4.0]), geo.quat_identity(),
                                   np.zeros(3), calib.extrinsics, calib.camera)
        np.testing.assert_allclose(jac["d_c"], np.eye(2))

    def test_projection_blocks_match_finite_differences(self):
        calib = random_calibration()
        ex, cam = calib.extrinsics, calib.camera
        eps = 1e-6
        checked = 0
        while checked < 25:
            q = geo.quat_exp(rng.standard_normal(3))
            p = rng.standard_normal(3)
            pc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 4)])
            pi = geo.quat_rotate(geo.quat_inverse(ex.q_ci), pc - ex.p_ci)
            l = geo.quat_rotate(q, pi) + p
            jac = sm.project_jacobians(l, q, p, ex, cam)
            if not jac["valid"]:
                continue
            checked += 1

            def proj(qq=q, pp=p, ll=l, e=ex, i=cam):
                c, _ = sm.landmark_in_camera(ll, qq, pp, e)
                return sm.project_cam(c, i)[0]

            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                fd = (proj(qq=geo.quat_boxplus(q, d)) - proj(qq=geo.quat_boxplus(q, -d))) / (2 * eps)
                np.testing.assert_allclose(fd, jac["d_theta"][:, k], rtol=2e-5, atol=1e-4)
                fd = (proj(pp=p + d) - proj(pp=p - d)) / (2 * eps)
                np.testing.assert_allclose(fd, jac["d_p"][:, k], rtol=2e-5, atol=1e-4)
                fd = (proj(ll=l + d) - proj(ll=l - d)) / (2 * eps)
                np.testing.assert_allclose(fd, jac["d_l"][:, k], rtol=2e-5, atol=1e-4)
                e2 = sm.CameraExtrinsics(geo.quat_boxplus(ex.q_ci, d), ex.p_ci)
                e3 = sm.CameraExtrinsics(geo.quat_boxplus(ex.q_ci, -d), ex.p_ci)
                fd = (proj(e=e2) - proj(e=e3)) / (2 * eps)
                np.testing.assert_allclose(fd, jac["d_qci"][:, k], rtol=2e-5, atol=1e-4)
            i2 = sm.CameraIntrinsics(cam.f, cam.c, cam.w + eps)
            i3 = sm.CameraIntrinsics(cam.f, cam.c, cam.w - eps)
            fd = (proj(i=i2) - proj(i=i3)) / (2 * eps)
            np.testing.assert_allclose(fd, jac["d_w"][:, 0], rtol=2e-5, atol=1e-5)

    def test_gyro_accel_blocks_match_finite_differences(self):
        eps = 1e-6
        for _ in range(20):
            gyro = sm.GyroIntrinsics(1 + 0.05 * rng.random(3), 0.02 * rng.standard_normal(3))
            accel = sm.AccelIntrinsics(1 + 0.05 * rng.random(3), 0.02 * rng.standard_normal(3),
                                       geo.quat_exp(0.1 * rng.standard_normal(3)))
            w = rng.standard_normal(3)
            a = rng.standard_normal(3)
            q_ig = geo.quat_exp(rng.standard_normal(3))
            bg, ba = rng.standard_normal(3), rng.standard_normal(3)
            Jg = sm.gyro_jacobians(w, gyro, bg)
            Ja = sm.accel_jacobians(a, q_ig, accel, ba)
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                fd = (sm.gyro_measure(w + d, gyro, bg) - sm.gyro_measure(w - d, gyro, bg)) / (2 * eps)
                np.testing.assert_allclose(fd, Jg["d_omega"][:, k], rtol=1e-6, atol=1e-8)
                g2 = sm.GyroIntrinsics(gyro.s_g + d, gyro.m_g)
                g3 = sm.GyroIntrinsics(gyro.s_g - d, gyro.m_g)
                fd = (sm.gyro_measure(w, g2, bg) - sm.gyro_measure(w, g3, bg)) / (2 * eps)
                np.testing.assert_allclose(fd, Jg["d_sg_mg"][:, k], rtol=1e-6, atol=1e-8)
                g2 = sm.GyroIntrinsics(gyro.s_g, gyro.m_g + d)
                g3 = sm.GyroIntrinsics(gyro.s_g, gyro.m_g - d)
                fd = (sm.gyro_measure(w, g2, bg) - sm.gyro_measure(w, g3, bg)) / (2 * eps)
                np.testing.assert_allclose(fd, Jg["d_sg_mg"][:, 3 + k], rtol=1e-6, atol=1e-8)
                fd = (sm.accel_measure(a, geo.quat_boxplus(q_ig, d), accel, ba)
                      - sm.accel_measure(a, geo.quat_boxplus(q_ig, -d), accel, ba)) / (2 * eps)
                np.testing.assert_allclose(fd, Ja["d_theta_ig"][:, k], rtol=2e-5, atol=1e-5)
                a2 = sm.AccelIntrinsics(accel.s_a, accel.m_a, geo.quat_boxplus(accel.q_ai, d))
                a3 = sm.AccelIntrinsics(accel.s_a, accel.m_a, geo.quat_boxplus(accel.q_ai, -d))
                fd = (sm.accel_measure(a, q_ig, a2, ba) - sm.accel_measure(a, q_ig, a3, ba)) / (2 * eps)
                np.testing.assert_allclose(fd, Ja["d_qai"][:, k], rtol=2e-5, atol=1e-5)


class TestCalibrationParams:
    def test_boxplus_boxminus_roundtrip(self):
        a = random_calibration()
        d = 0.01 * rng.standard_normal(sm.THETA_DIM)
        b = a.boxplus(d)
        np.testing.assert_allclose(b.boxminus(a), d, atol=1e-10)

    def test_json_roundtrip_exact(self):
        a = random_calibration()
        b = sm.CalibrationParams.from_json(a.to_json())
        for key, val in a.to_json_dict().items():
            assert np.array_equal(val, b.to_json_dict()[key]), key
        assert a.to_json() == b.to_json()

    def test_json_key_order_documented(self):
        keys = list(json.loads(random_calibration().to_json()))
        assert keys == list(sm.CalibrationParams._JSON_KEYS)

    def test_canonical_sign_at_serialization(self):
        a = random_calibration()
        a.extrinsics.q_ci = -a.extrinsics.q_ci
        d = a.to_json_dict()
        assert d["q_ci"][0] >= 0.0

    def test_theta_layout_26(self):
        assert sm.THETA_DIM == 26
        idx = sm.theta_index()
        flat = [i for cols in idx.values() for i in cols]
        assert sorted(flat) == list(range(26))

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            sm.CameraIntrinsics(w=4.0)
        with pytest.raises(ValueError):
            sm.CameraIntrinsics(f=np.array([-1.0, 250.0]))

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            sm.NoiseSpec(gyro=0.0)
