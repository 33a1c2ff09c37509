"""Factor evaluation: preintegrated inertial, reprojection, bias and gauge.

Residual conventions:

- Keyframe tangent ordering is [d_phi, d_p, d_v, d_ba, d_bg] (15), matching
  the keyframe state field order. Inertial residual rows use the same order.
- All residuals returned by the *_eval functions are whitened, so the total
  cost is just the sum of squares and the normal equations need no extra
  weighting.
- The inertial factor integrates the raw samples of its interval at the
  current bias/intrinsics estimates every time it is evaluated; the
  15x15 covariance used for whitening is the one propagated alongside.

The inertial residual is expressed in the frame of the interval's first
keyframe:

    r_q = log(dq^-1 * (q_k^-1 q_k1))
    r_p = R_k^T (p_k1 - p_k - v_k dt - 0.5 g dt^2) - dp
    r_v = R_k^T (v_k1 - v_k - g dt) - dv
    r_b = b_k1 - b_k                       (accel and gyro random walks)

with (dq, dp, dv) the preintegrated increments. Integration uses the
midpoint rule per IMU step on both rotation and specific force.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import sensor_models as sm
from .states import ImuData, KeyframeState

# Parameter columns of the preintegration Jacobian:
# [b_a, b_g, s_g, m_g, s_a, m_a, q_ai]
_NP = 21
_COL_BA = slice(0, 3)
_COL_BG = slice(3, 6)
_COL_THETA_I = slice(6, 21)


@dataclass
class PreintBatch:
    """Preintegrated increments for a batch of keyframe intervals."""

    dt: np.ndarray        # (n,)
    dq: np.ndarray        # (n, 4)
    dp: np.ndarray        # (n, 3)
    dv: np.ndarray        # (n, 3)
    J: np.ndarray         # (n, 9, 21) d(dq,dp,dv)/d(b_a,b_g,theta_i)
    cov: np.ndarray       # (n, 15, 15) residual covariance


def preintegrate_batch(t, w_meas, a_meas, b_g, b_a, gyro: sm.GyroIntrinsics,
                       accel: sm.AccelIntrinsics, noise: sm.NoiseSpec,
                       with_cov=True):
    """Integrate IMU sample windows for n intervals at once.

    t, w_meas, a_meas have shape (n, m[, 3]) with m samples per interval;
    sample 0 and sample m-1 lie on the bounding keyframes. b_g, b_a are the
    (n, 3) biases of each interval's first keyframe.
    """
    t = np.asarray(t, dtype=float)
    n, m = t.shape
    if m < 2:
        raise ValueError("need at least two IMU samples per interval")
    if np.any(np.diff(t, axis=1) <= 0.0):
        raise ValueError("IMU timestamps must be strictly increasing")

    Tg_inv = np.linalg.inv(gyro.matrix())
    Ta_inv = np.linalg.inv(accel.matrix())
    R_ai_t = geo.quat_to_matrix(accel.q_ai).T

    # De-calibrated body rates and specific force (I frame) per sample.
    w_hat = (w_meas - b_g[:, None, :]) @ Tg_inv.T
    y = (a_meas - b_a[:, None, :]) @ Ta_inv.T
    f_hat = y @ R_ai_t.T

    dq = np.tile(geo.quat_identity(), (n, 1))
    dp = np.zeros((n, 3))
    dv = np.zeros((n, 3))
    J = np.zeros((n, 9, _NP))
    P = np.zeros((n, 9, 9)) if with_cov else None

    for j in range(m - 1):
        dt = (t[:, j + 1] - t[:, j])[:, None, None]           # (n,1,1)
        dts = dt[:, 0, 0]
        wbar = 0.5 * (w_hat[:, j] + w_hat[:, j + 1])
        fbar = 0.5 * (f_hat[:, j] + f_hat[:, j + 1])
        ybar = 0.5 * (y[:, j] + y[:, j + 1])

        phi_full = wbar * dts[:, None]
        phi_half = 0.5 * phi_full
        q_full = geo.quat_exp(phi_full)
        R_full = geo.quat_to_matrix(q_full)
        R_half = geo.quat_to_matrix(geo.quat_exp(phi_half))
        Jr_full = geo.so3_right_jacobian(phi_full)
        Jr_half = geo.so3_right_jacobian(phi_half)
        M = geo.quat_to_matrix(dq) @ R_half                    # mid-step attitude
        G = M @ geo.skew(fbar)

        # Input Jacobians of the midpoint body rate / specific force.
        Wx = np.zeros((n, 3, _NP))
        Wx[:, :, _COL_BG] = -Tg_inv
        Wx[:, :, 6:12] = -np.einsum("ij,njk->nik", Tg_inv, sm._triad_apply_jacobian(wbar))
        Fx = np.zeros((n, 3, _NP))
        RT = R_ai_t @ Ta_inv
        Fx[:, :, _COL_BA] = -RT
        Fx[:, :, 12:18] = -np.einsum("ij,njk->nik", RT, sm._triad_apply_jacobian(ybar))
        Fx[:, :, 18:21] = geo.skew(fbar)

        # Error-state transition (rows/cols ordered phi, p, v).
        A = np.zeros((n, 9, 9))
        A[:, 0:3, 0:3] = np.swapaxes(R_full, 1, 2)
        A[:, 3:6, 3:6] = np.eye(3)
        A[:, 6:9, 6:9] = np.eye(3)
        GRh = G @ np.swapaxes(R_half, 1, 2)
        A[:, 3:6, 0:3] = -0.5 * dt * dt * GRh
        A[:, 3:6, 6:9] = dt * np.eye(3)
        A[:, 6:9, 0:3] = -dt * GRh

        B = np.zeros((n, 9, 6))
        GJh = G @ Jr_half * (0.5 * dt)
        B[:, 0:3, 0:3] = Jr_full * dt
        B[:, 3:6, 0:3] = -0.5 * dt * dt * GJh
        B[:, 3:6, 3:6] = 0.5 * dt * dt * M
        B[:, 6:9, 0:3] = -dt * GJh
        B[:, 6:9, 3:6] = dt * M

        J = A @ J + B @ np.concatenate([Wx, Fx], axis=1)

        if with_cov:
            # Midpoint of two samples halves the white-noise variance.
            sg2 = noise.gyro**2 / dts * 0.5
            sa2 = noise.accel**2 / dts * 0.5
            Qw = Tg_inv @ Tg_inv.T
            Qf = RT @ RT.T
            Q = np.zeros((n, 6, 6))
            Q[:, 0:3, 0:3] = sg2[:, None, None] * Qw
            Q[:, 3:6, 3:6] = sa2[:, None, None] * Qf
            P = A @ P @ np.swapaxes(A, 1, 2) + B @ Q @ np.swapaxes(B, 1, 2)

        # State update (midpoint rule).
        a_mid = np.einsum("nij,nj->ni", M, fbar)
        dp = dp + dv * dts[:, None] + 0.5 * a_mid * dts[:, None] ** 2
        dv = dv + a_mid * dts[:, None]
        dq = geo.quat_multiply(dq, q_full)

    dq = geo.quat_normalize(dq)
    dt_total = t[:, -1] - t[:, 0]

    cov = None
    if with_cov:
        cov = np.zeros((n, 15, 15))
        cov[:, :9, :9] = 0.5 * (P + np.swapaxes(P, 1, 2))
        cov[:, 9:12, 9:12] = (noise.accel_bias**2 * dt_total)[:, None, None] * np.eye(3)
        cov[:, 12:15, 12:15] = (noise.gyro_bias**2 * dt_total)[:, None, None] * np.eye(3)
    return PreintBatch(dt_total, dq, dp, dv, J, cov)


def inertial_residuals(pre: PreintBatch, q_i, p_i, v_i, ba_i, bg_i,
                       q_j, p_j, v_j, ba_j, bg_j, gravity=sm.GRAVITY_W,
                       with_jacobians=True):
    """Raw (unwhitened) inertial residuals and Jacobian blocks.

    Returns (r (n,15), J_i (n,15,15), J_j (n,15,15), J_theta (n,15,15))
    with J_theta over the theta_i tangent [s_g, m_g, s_a, m_a, q_ai].
    """
    n = len(pre.dt)
    dt = pre.dt[:, None]
    R_i = geo.quat_to_matrix(q_i)
    R_i_t = np.swapaxes(R_i, 1, 2)

    xi = geo.quat_multiply(geo.quat_inverse(q_i), q_j)
    m_q = geo.quat_multiply(geo.quat_inverse(pre.dq), xi)
    r_q = geo.quat_log(m_q)
    u_p = p_j - p_i - v_i * dt - 0.5 * gravity * dt**2
    u_v = v_j - v_i - gravity * dt
    rp_loc = np.einsum("nij,nj->ni", R_i_t, u_p)
    rv_loc = np.einsum("nij,nj->ni", R_i_t, u_v)

    r = np.empty((n, 15))
    r[:, 0:3] = r_q
    r[:, 3:6] = rp_loc - pre.dp
    r[:, 6:9] = rv_loc - pre.dv
    r[:, 9:12] = ba_j - ba_i
    r[:, 12:15] = bg_j - bg_i

    if not with_jacobians:
        return r, None, None, None

    Jri = geo.so3_right_jacobian_inv(r_q)
    R_xi_t = np.swapaxes(geo.quat_to_matrix(xi), 1, 2)
    C = -Jri @ np.swapaxes(geo.quat_to_matrix(m_q), 1, 2)

    J_i = np.zeros((n, 15, 15))
    J_j = np.zeros((n, 15, 15))
    J_t = np.zeros((n, 15, 15))

    # rotation rows
    J_i[:, 0:3, 0:3] = -Jri @ R_xi_t
    J_i[:, 0:3, 9:12] = C @ pre.J[:, 0:3, _COL_BA]
    J_i[:, 0:3, 12:15] = C @ pre.J[:, 0:3, _COL_BG]
    J_j[:, 0:3, 0:3] = Jri
    J_t[:, 0:3, :] = C @ pre.J[:, 0:3, _COL_THETA_I]

    # position rows
    J_i[:, 3:6, 0:3] = geo.skew(rp_loc)
    J_i[:, 3:6, 3:6] = -R_i_t
    J_i[:, 3:6, 6:9] = -R_i_t * dt[:, :, None]
    J_i[:, 3:6, 9:12] = -pre.J[:, 3:6, _COL_BA]
    J_i[:, 3:6, 12:15] = -pre.J[:, 3:6, _COL_BG]
    J_j[:, 3:6, 3:6] = R_i_t
    J_t[:, 3:6, :] = -pre.J[:, 3:6, _COL_THETA_I]

    # velocity rows
    J_i[:, 6:9, 0:3] = geo.skew(rv_loc)
    J_i[:, 6:9, 6:9] = -R_i_t
    J_i[:, 6:9, 9:12] = -pre.J[:, 6:9, _COL_BA]
    J_i[:, 6:9, 12:15] = -pre.J[:, 6:9, _COL_BG]
    J_j[:, 6:9, 6:9] = R_i_t
    J_t[:, 6:9, :] = -pre.J[:, 6:9, _COL_THETA_I]

    # bias random-walk rows
    J_i[:, 9:12, 9:12] = -np.eye(3)
    J_i[:, 12:15, 12:15] = -np.eye(3)
    J_j[:, 9:12, 9:12] = np.eye(3)
    J_j[:, 12:15, 12:15] = np.eye(3)
    return r, J_i, J_j, J_t


class PreintegratedImu:
    """Preintegrated IMU data over one keyframe interval.

    Convenience wrapper around the batched kernel for the single-interval
    API: construction integrates the samples once at the given bias and
    intrinsics linearization point.
    """

    def __init__(self, imu: ImuData, gyro: sm.GyroIntrinsics, accel: sm.AccelIntrinsics,
                 b_g, b_a, noise: sm.NoiseSpec):
        if len(imu) < 2:
            raise ValueError("empty IMU interval")
        pre = preintegrate_batch(
            imu.t[None, :], imu.w[None, :, :], imu.a[None, :, :],
            np.asarray(b_g, dtype=float)[None, :], np.asarray(b_a, dtype=float)[None, :],
            gyro, accel, noise,
        )
        self._pre = pre
        self.dt = float(pre.dt[0])
        self.dq = pre.dq[0]
        self.dp = pre.dp[0]
        self.dv = pre.dv[0]
        self.covariance = pre.cov[0]
        self.param_jacobian = pre.J[0]
        self.b_g = np.asarray(b_g, dtype=float)
        self.b_a = np.asarray(b_a, dtype=float)

    def predict(self, s: KeyframeState) -> KeyframeState:
        """Propagate a keyframe state across the interval."""
        R = geo.quat_to_matrix(s.q)
        q1 = geo.quat_normalize(geo.quat_multiply(s.q, self.dq))
        p1 = s.p + s.v * self.dt + 0.5 * sm.GRAVITY_W * self.dt**2 + R @ self.dp
        v1 = s.v + sm.GRAVITY_W * self.dt + R @ self.dv
        return KeyframeState(q1, p1, v1, s.b_a.copy(), s.b_g.copy(), s.t + self.dt)

    def residual(self, s0: KeyframeState, s1: KeyframeState):
        r, _, _, _ = inertial_residuals(
            self._pre, s0.q[None], s0.p[None], s0.v[None], s0.b_a[None], s0.b_g[None],
            s1.q[None], s1.p[None], s1.v[None], s1.b_a[None], s1.b_g[None],
            with_jacobians=False,
        )
        return r[0]

    def residual_jacobians(self, s0: KeyframeState, s1: KeyframeState):
        r, J_i, J_j, J_t = inertial_residuals(
            self._pre, s0.q[None], s0.p[None], s0.v[None], s0.b_a[None], s0.b_g[None],
            s1.q[None], s1.p[None], s1.v[None], s1.b_a[None], s1.b_g[None],
        )
        return r[0], J_i[0], J_j[0], J_t[0]


def preintegrate(imu: ImuData, gyro: sm.GyroIntrinsics, accel: sm.AccelIntrinsics,
                 b_g, b_a, noise: sm.NoiseSpec) -> PreintegratedImu:
    """Build the inertial factor for one keyframe interval."""
    return PreintegratedImu(imu, gyro, accel, b_g, b_a, noise)


def bias_bridge_residual(ba_i, bg_i, ba_j, bg_j, dt, noise: sm.NoiseSpec):
    """Whitened random-walk residual linking bias states across a gap.

    Returns (r (6,), sqrt-information diagonal (6,)); the raw covariance is
    diag(sigma_ba^2 dt I, sigma_bg^2 dt I).
    """
    dt = float(dt)
    if dt <= 0.0:
        raise ValueError("bias bridge needs a positive time gap")
    w_a = 1.0 / (noise.accel_bias * np.sqrt(dt))
    w_g = 1.0 / (noise.gyro_bias * np.sqrt(dt))
    sqrt_info = np.concatenate([np.full(3, w_a), np.full(3, w_g)])
    r = np.concatenate([np.asarray(ba_j) - np.asarray(ba_i), np.asarray(bg_j) - np.asarray(bg_i)])
    return r * sqrt_info, sqrt_info


def reprojection_residual(uv_meas, l_w, q_gi, p_gi, calib: sm.CalibrationParams,
                          noise: sm.NoiseSpec):
    """Whitened reprojection residual (z - z_hat)/sigma_c for one observation.

    Returns (r (2,), active flag); behind-camera observations are flagged
    inactive and get a zero residual.
    """
    jac = sm.project_jacobians(l_w, q_gi, p_gi, calib.extrinsics, calib.camera)
    r = (np.asarray(uv_meas, dtype=float) - jac["uv"]) / noise.pixel
    active = bool(np.asarray(jac["valid"]))
    return (r if active else np.zeros(2)), active


def gauge_prior_eval(q, p, anchor_q, anchor_p, sqrt_weight):
    """4-dof gauge prior holding position and yaw about gravity.

    Returns (r (4,), J (4, 6)) with J over the pose tangent [d_phi, d_p];
    the residual is sqrt_weight * [p - p0, e_z . log(q q0^-1)].
    """
    phi = geo.quat_log(geo.quat_multiply(q, geo.quat_inverse(anchor_q)))
    r = np.empty(4)
    r[:3] = sqrt_weight * (p - anchor_p)
    r[3] = sqrt_weight * phi[2]
    J = np.zeros((4, 6))
    J[:3, 3:6] = sqrt_weight * np.eye(3)
    dphi = geo.so3_right_jacobian_inv(phi) @ geo.quat_to_matrix(anchor_q)
    J[3, 0:3] = sqrt_weight * dphi[2]
    return r, J
