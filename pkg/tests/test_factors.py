import numpy as np
import pytest

from helpers import measured_imu, sinusoid_kinematics

from segcal import factors as fa
from segcal import geometry as geo
from segcal import sensor_models as sm
from segcal.states import ImuData, KeyframeState

rng = np.random.default_rng(55)
NOISE = sm.NoiseSpec()
IDENT_G = sm.GyroIntrinsics()
IDENT_A = sm.AccelIntrinsics()


def rest_state():
    return KeyframeState(geo.quat_identity(), np.zeros(3), np.zeros(3),
                         np.zeros(3), np.zeros(3), 0.0)


def random_intrinsics():
    gyro = sm.GyroIntrinsics(1 + 0.01 * rng.standard_normal(3), 0.005 * rng.standard_normal(3))
    accel = sm.AccelIntrinsics(1 + 0.02 * rng.standard_normal(3), 0.01 * rng.standard_normal(3),
                               geo.quat_exp(0.02 * rng.standard_normal(3)))
    return gyro, accel


class TestPreintegration:
    def test_static_rest_propagation(self):
        t = np.linspace(0, 0.1, 21)
        imu = ImuData(t, np.zeros((21, 3)), np.tile([0, 0, 9.80665], (21, 1)))
        pre = fa.preintegrate(imu, IDENT_G, IDENT_A, np.zeros(3), np.zeros(3), NOISE)
        s1 = pre.predict(rest_state())
        assert np.linalg.norm(s1.p) < 1e-12
        assert np.linalg.norm(s1.v) < 1e-12
        assert geo.rodrigues_angle(s1.q) < 1e-12
        r = pre.residual(rest_state(), s1)
        assert np.max(np.abs(r)) < 1e-8

    def test_constant_yaw_rate(self):
        t = np.linspace(0, 1.0, 201)
        w = np.tile([0, 0, 0.1], (201, 1))
        q_t = geo.quat_exp(np.outer(t, [0, 0, 0.1]))
        f = geo.quat_rotate(geo.quat_inverse(q_t), -sm.GRAVITY_W)
        pre = fa.preintegrate(ImuData(t, w, f), IDENT_G, IDENT_A,
                              np.zeros(3), np.zeros(3), NOISE)
        np.testing.assert_allclose(geo.quat_log(pre.dq), [0, 0, 0.1], atol=1e-12)

    def test_matches_dense_integration_oracle(self):
        """200 Hz midpoint integration against a 10 kHz reference."""
        ts_c = np.linspace(0, 0.1, 21)
        ts_f = np.linspace(0, 0.1, 1001)
        wc, fc, _ = sinusoid_kinematics(ts_c)
        wf, ff, _ = sinusoid_kinematics(ts_f)
        pc = fa.preintegrate(ImuData(ts_c, wc, fc), IDENT_G, IDENT_A,
                             np.zeros(3), np.zeros(3), NOISE)
        pf = fa.preintegrate(ImuData(ts_f, wf, ff), IDENT_G, IDENT_A,
                             np.zeros(3), np.zeros(3), NOISE)
        assert np.linalg.norm(geo.quat_boxminus(pc.dq, pf.dq)) < 1e-6
        assert np.linalg.norm(pc.dp - pf.dp) < 1e-6
        assert np.linalg.norm(pc.dv - pf.dv) < 1e-6

    def test_rejects_empty_or_unsorted_intervals(self):
        with pytest.raises(ValueError):
            fa.preintegrate(ImuData(np.array([0.0]), np.zeros((1, 3)), np.zeros((1, 3))),
                            IDENT_G, IDENT_A, np.zeros(3), np.zeros(3), NOISE)
        with pytest.raises(ValueError):
            ImuData(np.array([0.0, 0.1, 0.05]), np.zeros((3, 3)), np.zeros((3, 3)))

    def test_covariance_spd_and_bias_blocks(self):
        ts = np.linspace(0, 0.1, 21)
        imu = measured_imu(ts, sm.CalibrationParams(), np.zeros(3), np.zeros(3))
        pre = fa.preintegrate(imu, IDENT_G, IDENT_A, np.zeros(3), np.zeros(3), NOISE)
        assert pre.covariance.shape == (15, 15)
        np.testing.assert_array_less(0.0, np.linalg.eigvalsh(pre.covariance).min())
        np.testing.assert_allclose(pre.covariance[9:12, 9:12],
                                   NOISE.accel_bias**2 * 0.1 * np.eye(3), rtol=1e-9)
        np.testing.assert_allclose(pre.covariance[12:15, 12:15],
                                   NOISE.gyro_bias**2 * 0.1 * np.eye(3), rtol=1e-9)


class TestInertialJacobians:
    def test_all_blocks_match_finite_differences(self):
        gyro, accel = random_intrinsics()
        ts = np.linspace(0, 0.1, 21)
        bg0 = 0.002 * rng.standard_normal(3)
        ba0 = 0.05 * rng.standard_normal(3)
        calib = sm.CalibrationParams(gyro=gyro, accel=accel)
        imu = measured_imu(ts, calib, bg0, ba0, scale=1.0)
        eps = 1e-6

        def boxplus(s, d):
            return KeyframeState(geo.quat_boxplus(s.q, d[0:3]), s.p + d[3:6], s.v + d[6:9],
                                 s.b_a + d[9:12], s.b_g + d[12:15], s.t)

        def resid(s0, s1, g=gyro, a=accel):
            return fa.preintegrate(imu, g, a, s0.b_g, s0.b_a, NOISE).residual(s0, s1)

        for _ in range(4):
            s0 = KeyframeState(geo.quat_exp(rng.standard_normal(3)), rng.standard_normal(3),
                               rng.standard_normal(3), ba0.copy(), bg0.copy(), 0.0)
            pre0 = fa.preintegrate(imu, gyro, accel, s0.b_g, s0.b_a, NOISE)
            s1 = pre0.predict(s0)
            s1 = boxplus(s1, 0.01 * rng.standard_normal(15))
            _, Ji, Jj, Jt = pre0.residual_jacobians(s0, s1)
            for k in range(15):
                d = np.zeros(15)
                d[k] = eps
                fd = (resid(boxplus(s0, d), s1) - resid(boxplus(s0, -d), s1)) / (2 * eps)
                rel = np.max(np.abs(fd - Ji[:, k])) / max(np.max(np.abs(Ji[:, k])), 1.0)
                assert rel < 1e-5, ("state-i col", k, rel)
                fd = (resid(s0, boxplus(s1, d)) - resid(s0, boxplus(s1, -d))) / (2 * eps)
                rel = np.max(np.abs(fd - Jj[:, k])) / max(np.max(np.abs(Jj[:, k])), 1.0)
                assert rel < 1e-5, ("state-j col", k, rel)
                g2 = sm.GyroIntrinsics(gyro.s_g + d[0:3], gyro.m_g + d[3:6])
                g3 = sm.GyroIntrinsics(gyro.s_g - d[0:3], gyro.m_g - d[3:6])
                a2 = sm.AccelIntrinsics(accel.s_a + d[6:9], accel.m_a + d[9:12],
                                        geo.quat_boxplus(accel.q_ai, d[12:15]))
                a3 = sm.AccelIntrinsics(accel.s_a - d[6:9], accel.m_a - d[9:12],
                                        geo.quat_boxplus(accel.q_ai, -d[12:15]))
                fd = (resid(s0, s1, g2, a2) - resid(s0, s1, g3, a3)) / (2 * eps)
                rel = np.max(np.abs(fd - Jt[:, k])) / max(np.max(np.abs(Jt[:, k])), 1.0)
                assert rel < 1e-5, ("theta col", k, rel)


class TestBiasBridge:
    def test_equal_biases_zero_residual(self):
        b = rng.standard_normal(3)
        r, _ = fa.bias_bridge_residual(b, b, b, b, 1.5, NOISE)
        np.testing.assert_allclose(r, 0.0)

    def test_random_walk_scaling(self):
        """Doubling the gap doubles the covariance."""
        _, w1 = fa.bias_bridge_residual(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3),
                                        1.0, NOISE)
        _, w2 = fa.bias_bridge_residual(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3),
                                        2.0, NOISE)
        np.testing.assert_allclose(1.0 / w2**2, 2.0 / w1**2, rtol=1e-12)

    def test_rejects_non_positive_gap(self):
        z = np.zeros(3)
        with pytest.raises(ValueError):
            fa.bias_bridge_residual(z, z, z, z, 0.0, NOISE)

    def test_whitened_residual_unit_variance(self):
        """Monte Carlo: whitened residuals of sampled walks have variance 1."""
        n = 10000
        dt = 0.7
        g = np.random.default_rng(3)
        draws = []
        for _ in range(n):
            step_a = NOISE.accel_bias * np.sqrt(dt) * g.standard_normal(3)
            step_g = NOISE.gyro_bias * np.sqrt(dt) * g.standard_normal(3)
            r, _ = fa.bias_bridge_residual(np.zeros(3), np.zeros(3), step_a, step_g, dt, NOISE)
            draws.append(r)
        var = np.var(np.stack(draws), axis=0)
        np.testing.assert_allclose(var, 1.0, rtol=0.05)


class TestGaugePrior:
    def test_anchored_state_zero_residual(self):
        q = geo.quat_exp(rng.standard_normal(3))
        p = rng.standard_normal(3)
        r, _ = fa.gauge_prior_eval(q, p, q, p, 1e4)
        np.testing.assert_allclose(r, 0.0, atol=1e-9)

    def test_jacobian_matches_finite_differences(self):
        eps = 1e-6
        for _ in range(10):
            q = geo.quat_exp(0.5 * rng.standard_normal(3))
            p = rng.standard_normal(3)
            aq = geo.quat_boxplus(q, 0.05 * rng.standard_normal(3))
            ap = p + 0.05 * rng.standard_normal(3)
            _, J = fa.gauge_prior_eval(q, p, aq, ap, 100.0)
            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                rp, _ = fa.gauge_prior_eval(geo.quat_boxplus(q, d[:3]), p + d[3:], aq, ap, 100.0)
                rm, _ = fa.gauge_prior_eval(geo.quat_boxplus(q, -d[:3]), p - d[3:], aq, ap, 100.0)
                fd = (rp - rm) / (2 * eps)
                np.testing.assert_allclose(fd, J[:, k], rtol=1e-4, atol=1e-4)

    def test_only_yaw_constrained(self):
        """Roll/pitch perturbations leave the rotation residual unchanged."""
        q = geo.quat_identity()
        p = np.zeros(3)
        r0, _ = fa.gauge_prior_eval(geo.quat_boxplus(q, [0.1, 0.0, 0.0]), p, q, p, 1.0)
        r1, _ = fa.gauge_prior_eval(geo.quat_boxplus(q, [0.0, 0.1, 0.0]), p, q, p, 1.0)
        r2, _ = fa.gauge_prior_eval(geo.quat_boxplus(q, [0.0, 0.0, 0.1]), p, q, p, 1.0)
        assert abs(r0[3]) < 1e-12 and abs(r1[3]) < 1e-12
        assert abs(r2[3] - 0.1) < 1e-12
