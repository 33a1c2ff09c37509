"""Shared fixtures: analytic test trajectories and hand-built segments."""

import numpy as np

from segcal import geometry as geo
from segcal import sensor_models as sm
from segcal.config import ScenarioConfig
from segcal.simulator import generate
from segcal.states import ImuData, ObservationArray, Segment


def sinusoid_kinematics(ts, scale=0.2):
    """Smooth trajectory with closed-form body rates and specific force.

    Returns (omega_body, specific_force_body, q_gi) sampled at ts. The
    scale keeps second derivatives moderate so a 200 Hz midpoint
    integration stays within ~1e-6 of a dense one.
    """
    ts = np.asarray(ts, dtype=float)
    A = scale * np.array([0.3, 0.2, 0.15])
    om = np.array([2.0, 2.8, 3.6])
    ph = np.array([0.3, 1.2, 2.1])
    ang_A = scale * np.array([0.25, 0.2, 0.15])
    ang_om = np.array([2.4, 1.9, 3.1])
    ang_ph = np.array([1.0, 0.2, 2.4])
    acc = -A * om**2 * np.sin(om * ts[:, None] + ph)
    ang = ang_A * np.sin(ang_om * ts[:, None] + ang_ph)
    dang = ang_A * ang_om * np.cos(ang_om * ts[:, None] + ang_ph)
    y, p, r = ang[:, 0], ang[:, 1], ang[:, 2]
    z0 = np.zeros_like(y)
    qz = np.stack([np.cos(y / 2), z0, z0, np.sin(y / 2)], axis=-1)
    qy = np.stack([np.cos(p / 2), z0, np.sin(p / 2), z0], axis=-1)
    qx = np.stack([np.cos(r / 2), np.sin(r / 2), z0, z0], axis=-1)
    q = geo.quat_multiply(geo.quat_multiply(qz, qy), qx)
    dy, dp, dr = dang[:, 0], dang[:, 1], dang[:, 2]
    w = np.stack([
        dr - dy * np.sin(p),
        dp * np.cos(r) + dy * np.cos(p) * np.sin(r),
        -dp * np.sin(r) + dy * np.cos(p) * np.cos(r),
    ], axis=-1)
    f = geo.quat_rotate(geo.quat_inverse(q), acc - sm.GRAVITY_W)
    return w, f, q


def measured_imu(ts, calib: sm.CalibrationParams, b_g, b_a, scale=1.0):
    """IMU measurements of the sinusoid trajectory under a calibration."""
    w, f, _ = sinusoid_kinematics(ts, scale)
    w_meas = w @ calib.gyro.matrix().T + b_g
    a_meas = geo.quat_rotate(calib.accel.q_ai, f) @ calib.accel.matrix().T + b_a
    return ImuData(ts, w_meas, a_meas)


def frustum_segment(seed, n_kf=8, n_lm=18, kf_rate=2.0, noisy=True,
                    truth_calib=None, noise=None):
    """Segment whose landmarks are visible from every keyframe.

    Keyframes come from an excited scenario at a low keyframe rate (so a
    handful of keyframes still spans enough motion to make all calibration
    parameters observable for n_kf >= 8); landmarks are resampled in the
    middle keyframe's viewing cone until all project into every keyframe.
    """
    cfg = ScenarioConfig(
        duration_s=(n_kf - 1) / kf_rate + 0.5, keyframe_rate_hz=kf_rate,
        imu_rate_hz=100.0, motion="excited", seed=seed,
        n_landmarks=50, max_obs_per_keyframe=50,
    )
    if truth_calib is not None:
        cfg.truth_calibration = truth_calib
    noise = noise or sm.NoiseSpec()
    rng = np.random.default_rng(seed + 999)
    calib = cfg.truth_calibration
    ds = generate(cfg)
    kf = ds.truth_kf.slice(0, n_kf)
    lms = []
    tries = 0
    while len(lms) < n_lm and tries < 50000:
        tries += 1
        z = rng.uniform(1.5, 4.0)
        xy = rng.uniform(-0.9, 0.9, 2) * z
        p_i = geo.quat_rotate(geo.quat_inverse(calib.extrinsics.q_ci),
                              np.array([xy[0], xy[1], z]) - calib.extrinsics.p_ci)
        l = geo.quat_rotate(kf.q[n_kf // 2], p_i) + kf.p[n_kf // 2]
        if all(sm.landmark_in_camera(l, kf.q[k], kf.p[k], calib.extrinsics)[0][2] > 0.3
               for k in range(n_kf)):
            lms.append(l)
    assert len(lms) == n_lm, "could not place a fully co-visible landmark set"
    lms = np.array(lms)
    okf, olm, ouv = [], [], []
    for k in range(n_kf):
        p_c, _ = sm.landmark_in_camera(lms, kf.q[k], kf.p[k], calib.extrinsics)
        uv, _ = sm.project_cam(p_c, calib.camera)
        if noisy:
            uv = uv + noise.pixel * rng.standard_normal(uv.shape)
        okf += [k] * n_lm
        olm += list(range(n_lm))
        ouv.append(uv)
    lm_est = lms + (0.02 * rng.standard_normal(lms.shape) if noisy else 0.0)
    return Segment(
        id=0, first_kf=0, keyframes=kf, lm_ids=np.arange(n_lm, dtype=np.int64),
        lm_pos=lm_est,
        obs=ObservationArray(np.array(okf), np.array(olm), np.vstack(ouv)),
        imu=ds.imu.window(kf.t[0], kf.t[-1]),
    )


def fake_segment(seg_id, first_kf, n_kf, lm_ids, t0=None, kf_dt=0.1):
    """Minimal synthetic segment for database/partitioner logic tests."""
    from segcal.states import KeyframeArray

    t0 = first_kf * kf_dt if t0 is None else t0
    t = t0 + np.arange(n_kf) * kf_dt
    K = n_kf
    q = np.tile(geo.quat_identity(), (K, 1))
    lm_ids = np.asarray(lm_ids, dtype=np.int64)
    obs_kf = np.repeat(np.arange(first_kf, first_kf + K), len(lm_ids))
    obs_lm = np.tile(lm_ids, K)
    m = K * 10 + 1
    return Segment(
        id=seg_id, first_kf=first_kf,
        keyframes=KeyframeArray(t, q, np.zeros((K, 3)), np.zeros((K, 3)),
                                np.zeros((K, 3)), np.zeros((K, 3))),
        lm_ids=lm_ids, lm_pos=np.zeros((len(lm_ids), 3)),
        obs=ObservationArray(obs_kf, obs_lm, np.zeros((len(obs_kf), 2))),
        imu=ImuData(t0 + np.arange(m) * (kf_dt / 10), np.zeros((m, 3)),
                    np.tile([0, 0, 9.80665], (m, 1))),
    )


def dense_oracle_covariance(J):
    """Trailing-block covariance via SVD (the dense-inverse oracle).

    Evaluates the same matrix inverse as forming and inverting J^T J, but
    through the singular values of J, which keeps the float64 error at the
    level of cond(J) rather than cond(J)^2.
    """
    _, s, vt = np.linalg.svd(J, full_matrices=False)
    if s[-1] <= s[0] * 1e-12:
        return None
    return ((vt.T * s**-2) @ vt)[-26:, -26:]
