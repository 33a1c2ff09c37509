import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segcal import geometry as geo

rng = np.random.default_rng(1234)


def random_quat(n=None):
    shape = (3,) if n is None else (n, 3)
    return geo.quat_exp(rng.standard_normal(shape))


unit_vec3 = st.tuples(*[st.floats(-1, 1) for _ in range(3)]).filter(
    lambda v: 1e-6 < np.linalg.norm(v)
)


class TestQuaternion:
    def test_exp_log_roundtrip(self):
        for _ in range(100):
            phi = rng.uniform(-1, 1, 3) * rng.uniform(0, 3)
            if np.linalg.norm(phi) >= np.pi:
                continue
            np.testing.assert_allclose(geo.quat_log(geo.quat_exp(phi)), phi, atol=1e-10)

    def test_multiply_matches_matrix_product(self):
        a, b = random_quat(), random_quat()
        np.testing.assert_allclose(
            geo.quat_to_matrix(geo.quat_multiply(a, b)),
            geo.quat_to_matrix(a) @ geo.quat_to_matrix(b), atol=1e-12,
        )

    def test_rotate_matches_matrix(self):
        q = random_quat(16)
        v = rng.standard_normal((16, 3))
        np.testing.assert_allclose(
            geo.quat_rotate(q, v),
            np.einsum("nij,nj->ni", geo.quat_to_matrix(q), v), atol=1e-12,
        )

    def test_matrix_roundtrip(self):
        for _ in range(50):
            q = geo.quat_canonical(random_quat())
            np.testing.assert_allclose(geo.quat_from_matrix(geo.quat_to_matrix(q)), q, atol=1e-9)

    def test_norm_drift_rejected(self):
        with pytest.raises(ValueError):
            geo.quat_normalize(np.array([1.0, 0.1, 0.0, 0.0]))

    def test_right_jacobian_finite_differences(self):
        phi = rng.standard_normal(3)
        Jr = geo.so3_right_jacobian(phi)
        eps = 1e-7
        for k in range(3):
            d = np.zeros(3)
            d[k] = eps
            fd = geo.quat_boxminus(geo.quat_exp(phi + d), geo.quat_exp(phi)) / eps
            np.testing.assert_allclose(fd, Jr[:, k], atol=1e-5)
        np.testing.assert_allclose(geo.so3_right_jacobian_inv(phi) @ Jr, np.eye(3), atol=1e-9)


class TestBoxOperators:
    @settings(max_examples=50, deadline=None)
    @given(unit_vec3, unit_vec3)
    def test_boxplus_boxminus_roundtrip(self, u, v):
        a = geo.quat_exp(np.asarray(u))
        d = 0.8 * np.asarray(v)
        np.testing.assert_allclose(geo.quat_boxminus(geo.quat_boxplus(a, d), a), d, atol=1e-9)

    def test_self_difference_is_zero(self):
        q = random_quat()
        np.testing.assert_allclose(geo.quat_boxminus(q, q), 0.0, atol=1e-12)
        T = geo.Transform(q, rng.standard_normal(3))
        np.testing.assert_allclose(geo.transform_boxminus(T, T), 0.0, atol=1e-12)

    def test_axis_angle_by_construction(self):
        ten_deg = np.deg2rad(10.0)
        q = geo.quat_exp(np.array([0.0, 0.0, ten_deg]))
        d = geo.quat_boxminus(q, geo.quat_identity())
        assert abs(np.linalg.norm(d) - ten_deg) < 1e-12

    def test_matches_matrix_log_oracle(self):
        from scipy.linalg import logm

        for _ in range(20):
            a, b = random_quat(), random_quat()
            d = geo.quat_boxminus(a, b)
            # oracle: rotation-matrix logarithm of R_b^T R_a
            L = logm(geo.quat_to_matrix(b).T @ geo.quat_to_matrix(a))
            d_ref = np.array([L[2, 1], L[0, 2], L[1, 0]])
            np.testing.assert_allclose(d, d_ref.real, atol=1e-8)

    def test_symmetric_magnitude(self):
        a, b = random_quat(), random_quat()
        assert abs(np.linalg.norm(geo.quat_boxminus(a, b))
                   - np.linalg.norm(geo.quat_boxminus(b, a))) < 1e-10

    def test_generic_dispatch(self):
        v = rng.standard_normal(5)
        np.testing.assert_allclose(geo.boxminus(v + 1.0, v), 1.0)
        q = random_quat()
        np.testing.assert_allclose(geo.boxplus(q, geo.boxminus(q, q)), q, atol=1e-12)


class TestTransform:
    def test_identity_action(self):
        T = geo.Transform()
        np.testing.assert_allclose(geo.transform_point(T, [1.0, 2.0, 3.0]), [1, 2, 3])

    def test_pure_translation(self):
        T = geo.Transform(t=np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(geo.transform_point(T, np.zeros(3)), [0, 0, 1])

    def test_matches_homogeneous_matrix(self):
        for _ in range(20):
            T = geo.Transform(random_quat(), rng.standard_normal(3))
            p = rng.standard_normal(3)
            ref = (T.matrix() @ np.append(p, 1.0))[:3]
            np.testing.assert_allclose(geo.transform_point(T, p), ref, atol=1e-12)

    def test_compose_inverse_is_identity(self):
        T = geo.Transform(random_quat(), rng.standard_normal(3))
        I = T.compose(T.inverse())
        assert np.linalg.norm(I.t) < 1e-9
        assert abs(abs(I.q[0]) - 1.0) < 1e-9


class TestRodriguesAngle:
    def test_identity(self):
        assert geo.rodrigues_angle(geo.quat_identity()) == 0.0

    def test_quarter_turn(self):
        q = geo.quat_exp(np.array([np.pi / 2, 0, 0]))
        assert abs(geo.rodrigues_angle(q) - np.pi / 2) < 1e-12

    def test_matches_acos_oracle(self):
        for _ in range(50):
            q = random_quat()
            ref = 2.0 * np.arccos(min(abs(q[0]), 1.0))
            assert abs(geo.rodrigues_angle(q) - ref) < 1e-7
        assert 0.0 <= geo.rodrigues_angle(random_quat()) <= np.pi


class TestAverageQuaternion:
    def test_identical_inputs(self):
        q = geo.quat_canonical(random_quat())
        np.testing.assert_allclose(geo.average_quaternion(np.tile(q, (5, 1))), q, atol=1e-12)

    def test_sign_invariance(self):
        q = geo.quat_canonical(random_quat())
        m = geo.average_quaternion(np.stack([q, -q]))
        assert min(np.linalg.norm(m - q), np.linalg.norm(m + q)) < 1e-9

    def test_midpoint_of_symmetric_pair(self):
        axis = np.array([0.0, 1.0, 0.0])
        qa = geo.quat_exp(0.3 * axis)
        qb = geo.quat_exp(-0.3 * axis)
        m = geo.average_quaternion(np.stack([qa, qb]))
        # eigendecomposition oracle on the 4x4 outer-product sum
        M = np.stack([qa, qb]).T @ np.stack([qa, qb])
        evals, evecs = np.linalg.eigh(M)
        ref = geo.quat_canonical(evecs[:, -1])
        np.testing.assert_allclose(m, ref, atol=1e-12)
        assert geo.rodrigues_angle(m) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            geo.average_quaternion(np.zeros((0, 4)))

    def test_maximizes_alignment(self):
        qs = random_quat(7)
        m = geo.average_quaternion(qs)
        score = np.sum((qs @ m) ** 2)
        for _ in range(200):
            other = geo.quat_exp(rng.standard_normal(3))
            assert np.sum((qs @ other) ** 2) <= score + 1e-9
