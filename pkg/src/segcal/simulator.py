"""Synthetic measurement generation with injectable ground-truth calibration.

Trajectories are sums of sinusoids per degree of freedom (position x/y/z
and yaw/pitch/roll), so velocity, acceleration and body rates are exact
closed forms. The "mixed" profile amplitude-modulates the excited terms
with a slow raised-cosine envelope; the product of sinusoids is expanded
into plain sinusoid terms, keeping derivatives exact.

Ground-truth keyframe states are produced by running the estimator's own
midpoint integration scheme over the noise-free kinematic samples. This
makes the synthetic world exactly self-consistent: with zero noise the
full estimation cost at ground truth vanishes to round-off, which is what
makes the simulator usable as a recovery oracle. Measurements are then the
forward sensor models evaluated on the true kinematics (plus noise and
random-walk biases when enabled), and pixel observations project landmarks
through the true integrated poses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import factors as fa
from . import geometry as geo
from . import sensor_models as sm
from .config import EstimateNoise, ScenarioConfig
from .states import ImuData, KeyframeArray, ObservationArray, Segment


@dataclass
class SinTerm:
    amp: float
    omega: float
    phase: float


@dataclass
class Channel:
    """offset + lin t + sum_i A_i sin(w_i t + p_i), with exact derivatives."""

    offset: float = 0.0
    lin: float = 0.0
    terms: list = field(default_factory=list)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        out = self.offset + self.lin * t
        for s in self.terms:
            out = out + s.amp * np.sin(s.omega * t + s.phase)
        return out

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full_like(t, self.lin)
        for s in self.terms:
            out = out + s.amp * s.omega * np.cos(s.omega * t + s.phase)
        return out

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for s in self.terms:
            out = out - s.amp * s.omega**2 * np.sin(s.omega * t + s.phase)
        return out

    def amplitude_bound(self):
        return sum(abs(s.amp) for s in self.terms)


def modulate(terms, env_omega, env_phase):
    """Multiply terms by the envelope 0.5 + 0.5 sin(env) exactly.

    Uses sin(a) sin(b) = (cos(a-b) - cos(a+b)) / 2 so the result is again a
    sum of sinusoids (cos x = sin(x + pi/2)).
    """
    out = []
    for s in terms:
        out.append(SinTerm(0.5 * s.amp, s.omega, s.phase))
        out.append(SinTerm(0.25 * s.amp, s.omega - env_omega,
                           s.phase - env_phase + 0.5 * np.pi))
        out.append(SinTerm(-0.25 * s.amp, s.omega + env_omega,
                           s.phase + env_phase + 0.5 * np.pi))
    return out


@dataclass
class TrajectoryModel:
    """Six analytic channels: position x/y/z and ZYX Euler yaw/pitch/roll."""

    pos: list          # three Channels
    yaw: Channel
    pitch: Channel
    roll: Channel

    def position(self, t):
        return np.stack([c.value(t) for c in self.pos], axis=-1)

    def velocity(self, t):
        return np.stack([c.d1(t) for c in self.pos], axis=-1)

    def acceleration(self, t):
        return np.stack([c.d2(t) for c in self.pos], axis=-1)

    def euler(self, t):
        return self.yaw.value(t), self.pitch.value(t), self.roll.value(t)

    def quat(self, t):
        """Attitude q_GI from ZYX Euler angles (body-to-world)."""
        y, p, r = self.euler(t)
        zero = np.zeros_like(np.asarray(t, dtype=float))
        qz = np.stack([np.cos(y / 2), zero, zero, np.sin(y / 2)], axis=-1)
        qy = np.stack([np.cos(p / 2), zero, np.sin(p / 2), zero], axis=-1)
        qx = np.stack([np.cos(r / 2), np.sin(r / 2), zero, zero], axis=-1)
        return geo.quat_multiply(geo.quat_multiply(qz, qy), qx)

    def omega_body(self, t):
        """Exact body rates for the ZYX Euler parametrization."""
        y, p, r = self.euler(t)
        dy, dp, dr = self.yaw.d1(t), self.pitch.d1(t), self.roll.d1(t)
        sr, cr = np.sin(r), np.cos(r)
        sp, cp = np.sin(p), np.cos(p)
        wx = dr - dy * sp
        wy = dp * cr + dy * cp * sr
        wz = -dp * sr + dy * cp * cr
        return np.stack([wx, wy, wz], axis=-1)


def _bounded_amps(rng, base, jitter=0.2):
    return base * (1.0 + jitter * (2.0 * rng.random(len(base)) - 1.0))


def build_trajectory(cfg: ScenarioConfig, rng) -> TrajectoryModel:
    """Motion-profile factory; randomness only jitters phases/amplitudes."""
    ex, ey, ez = cfg.room
    center = np.array([0.0, 0.0, 0.5 * ez])
    motion = cfg.motion

    def sin_terms(amps, omegas):
        phases = rng.uniform(0.0, 2.0 * np.pi, len(amps))
        return [SinTerm(a, w, p) for a, w, p in zip(amps, omegas, phases)]

    pos = [Channel(offset=center[i]) for i in range(3)]
    yaw, pitch, roll = Channel(), Channel(), Channel()

    if motion == "static":
        pass
    elif motion == "constant-velocity":
        span = 0.35 * np.array([ex, ey, 0.5 * ez])
        v = 2.0 * span / cfg.duration_s * np.where(rng.random(3) < 0.5, -1.0, 1.0)
        for i in range(3):
            pos[i].offset = center[i] - 0.5 * v[i] * cfg.duration_s
            pos[i].lin = v[i]
    else:
        rot_amps = {
            "yaw": _bounded_amps(rng, np.array([0.5, 0.25])),
            "pitch": _bounded_amps(rng, np.array([0.35, 0.18])),
            "roll": _bounded_amps(rng, np.array([0.3, 0.15])),
        }
        rot_omegas = {
            "yaw": 2.0 * np.pi * np.array([0.21, 0.73]),
            "pitch": 2.0 * np.pi * np.array([0.31, 0.87]),
            "roll": 2.0 * np.pi * np.array([0.27, 0.95]),
        }
        pos_amps = [
            _bounded_amps(rng, np.array([0.25 * ex, 0.08 * ex])),
            _bounded_amps(rng, np.array([0.25 * ey, 0.08 * ey])),
            _bounded_amps(rng, np.array([0.12 * ez, 0.05 * ez])),
        ]
        pos_omegas = [
            2.0 * np.pi * np.array([0.17, 0.61]),
            2.0 * np.pi * np.array([0.13, 0.53]),
            2.0 * np.pi * np.array([0.23, 0.79]),
        ]
        env_omega = 2.0 * np.pi / 40.0
        env_phase = rng.uniform(0.0, 2.0 * np.pi)

        def maybe_mod(terms):
            if motion == "mixed":
                return modulate(terms, env_omega, env_phase)
            return terms

        if motion in ("excited", "mixed", "pure-rotation"):
            yaw.terms = maybe_mod(sin_terms(rot_amps["yaw"], rot_omegas["yaw"]))
            pitch.terms = maybe_mod(sin_terms(rot_amps["pitch"], rot_omegas["pitch"]))
            roll.terms = maybe_mod(sin_terms(rot_amps["roll"], rot_omegas["roll"]))
        if motion in ("excited", "mixed"):
            for i in range(3):
                pos[i].terms = maybe_mod(sin_terms(pos_amps[i], pos_omegas[i]))
        if motion == "mixed":
            # calm baseline so quiet sections still move a little
            for i, ch in enumerate((yaw, pitch, roll)):
                ch.terms += sin_terms(np.array([0.03 - 0.005 * i]),
                                      2.0 * np.pi * np.array([0.05 + 0.01 * i]))
            for i in range(3):
                pos[i].terms += sin_terms(np.array([0.04]),
                                          2.0 * np.pi * np.array([0.04 + 0.012 * i]))

    return TrajectoryModel(pos=pos, yaw=yaw, pitch=pitch, roll=roll)


def place_landmarks(cfg: ScenarioConfig, rng):
    """Uniform landmark placement on the six room faces (area weighted)."""
    ex, ey, ez = cfg.room
    faces = [
        (ey * ez, "x", -0.5 * ex), (ey * ez, "x", 0.5 * ex),
        (ex * ez, "y", -0.5 * ey), (ex * ez, "y", 0.5 * ey),
        (ex * ey, "z", 0.0), (ex * ey, "z", ez),
    ]
    areas = np.array([f[0] for f in faces])
    pick = rng.choice(len(faces), size=cfg.n_landmarks, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, (cfg.n_landmarks, 2))
    pos = np.empty((cfg.n_landmarks, 3))
    for i, fi in enumerate(pick):
        _, axis, level = faces[fi]
        if axis == "x":
            pos[i] = [level, u[i, 0] * ey, (u[i, 1] + 0.5) * ez]
        elif axis == "y":
            pos[i] = [u[i, 0] * ex, level, (u[i, 1] + 0.5) * ez]
        else:
            pos[i] = [u[i, 0] * ex, u[i, 1] * ey, level]
    return pos


@dataclass
class Dataset:
    """Everything a run needs: truth, measurements and initial estimates."""

    meta: dict
    truth_kf: KeyframeArray
    truth_calib: sm.CalibrationParams
    lm_ids: np.ndarray
    truth_lm: np.ndarray
    est_kf: KeyframeArray
    est_lm: np.ndarray
    imu: ImuData
    obs: ObservationArray
    noise: sm.NoiseSpec

    @property
    def n_kf(self):
        return len(self.truth_kf)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "header", "version": 1, "meta": self.meta}) + "\n")
            fh.write(json.dumps({"type": "calibration",
                                 "truth": self.truth_calib.to_json_dict()}) + "\n")
            fh.write(json.dumps({
                "type": "noise", "gyro": self.noise.gyro, "gyro_bias": self.noise.gyro_bias,
                "accel": self.noise.accel, "accel_bias": self.noise.accel_bias,
                "pixel": self.noise.pixel}) + "\n")
            tk, ek = self.truth_kf, self.est_kf
            for i in range(len(tk)):
                fh.write(json.dumps({
                    "type": "keyframe", "i": i, "t": tk.t[i],
                    "truth": {"q": geo.quat_canonical(tk.q[i]).tolist(), "p": tk.p[i].tolist(),
                              "v": tk.v[i].tolist(), "b_a": tk.b_a[i].tolist(),
                              "b_g": tk.b_g[i].tolist()},
                    "est": {"q": geo.quat_canonical(ek.q[i]).tolist(), "p": ek.p[i].tolist(),
                            "v": ek.v[i].tolist(), "b_a": ek.b_a[i].tolist(),
                            "b_g": ek.b_g[i].tolist()},
                }) + "\n")
            for k, lid in enumerate(self.lm_ids):
                fh.write(json.dumps({"type": "landmark", "id": int(lid),
                                     "truth": self.truth_lm[k].tolist(),
                                     "est": self.est_lm[k].tolist()}) + "\n")
            for j in range(len(self.imu)):
                fh.write(json.dumps({"type": "imu", "t": self.imu.t[j],
                                     "w": self.imu.w[j].tolist(),
                                     "a": self.imu.a[j].tolist()}) + "\n")
            for n in range(len(self.obs)):
                fh.write(json.dumps({"type": "obs", "kf": int(self.obs.kf[n]),
                                     "lm": int(self.obs.lm[n]),
                                     "uv": self.obs.uv[n].tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, calib, noise = None, None, None
        kfs, lms, imus, obss = [], [], [], []
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec["type"]
                if kind == "header":
                    if rec.get("version") != 1:
                        raise ValueError("unsupported dataset version")
                    meta = rec["meta"]
                elif kind == "calibration":
                    calib = sm.CalibrationParams.from_json_dict(rec["truth"])
                elif kind == "noise":
                    noise = sm.NoiseSpec(rec["gyro"], rec["gyro_bias"], rec["accel"],
                                         rec["accel_bias"], rec["pixel"])
                elif kind == "keyframe":
                    kfs.append(rec)
                elif kind == "landmark":
                    lms.append(rec)
                elif kind == "imu":
                    imus.append(rec)
                elif kind == "obs":
                    obss.append(rec)
        if meta is None or calib is None or noise is None:
            raise ValueError("dataset file is missing header records")
        kfs.sort(key=lambda r: r["i"])

        def kf_array(key):
            return KeyframeArray(
                np.array([r["t"] for r in kfs]),
                np.array([r[key]["q"] for r in kfs]),
                np.array([r[key]["p"] for r in kfs]),
                np.array([r[key]["v"] for r in kfs]),
                np.array([r[key]["b_a"] for r in kfs]),
                np.array([r[key]["b_g"] for r in kfs]),
            )

        return cls(
            meta=meta,
            truth_kf=kf_array("truth"),
            truth_calib=calib,
            lm_ids=np.array([r["id"] for r in lms], dtype=np.int64),
            truth_lm=np.array([r["truth"] for r in lms]),
            est_kf=kf_array("est"),
            est_lm=np.array([r["est"] for r in lms]),
            imu=ImuData(np.array([r["t"] for r in imus]),
                        np.array([r["w"] for r in imus]),
                        np.array([r["a"] for r in imus])),
            obs=ObservationArray(np.array([r["kf"] for r in obss], dtype=np.int64),
                                 np.array([r["lm"] for r in obss], dtype=np.int64),
                                 np.array([r["uv"] for r in obss]).reshape(-1, 2)),
            noise=noise,
        )


def generate(cfg: ScenarioConfig) -> Dataset:
    """Generate a full synthetic dataset for one scenario (deterministic)."""
    root = np.random.SeedSequence(cfg.seed)
    rng_traj, rng_lm, rng_meas, rng_est = [np.random.default_rng(s) for s in root.spawn(4)]

    traj = build_trajectory(cfg, rng_traj)
    n_sub = int(round(cfg.imu_rate_hz / cfg.keyframe_rate_hz))
    n_kf = int(np.floor(cfg.duration_s * cfg.keyframe_rate_hz)) + 1
    n_imu = (n_kf - 1) * n_sub + 1
    t_imu = np.arange(n_imu) / cfg.imu_rate_hz
    t_kf = t_imu[::n_sub]

    # true kinematic samples
    w_body = traj.omega_body(t_imu)
    a_world = traj.acceleration(t_imu)
    q_ana = geo.quat_normalize(traj.quat(t_imu))
    f_spec = geo.quat_rotate(geo.quat_inverse(q_ana), a_world - sm.GRAVITY_W)

    # ground-truth keyframes: the estimator's integration scheme applied to
    # the noise-free kinematic samples
    ident_g = sm.GyroIntrinsics()
    ident_a = sm.AccelIntrinsics()
    wins = np.arange(n_sub + 1)[None, :] + n_sub * np.arange(n_kf - 1)[:, None]
    pre = fa.preintegrate_batch(
        t_imu[wins], w_body[wins], f_spec[wins],
        np.zeros((n_kf - 1, 3)), np.zeros((n_kf - 1, 3)),
        ident_g, ident_a, sm.NoiseSpec(), with_cov=False,
    )
    q_t = np.empty((n_kf, 4))
    p_t = np.empty((n_kf, 3))
    v_t = np.empty((n_kf, 3))
    q_t[0] = traj.quat(np.array([0.0]))[0]
    p_t[0] = traj.position(np.array([0.0]))[0]
    v_t[0] = traj.velocity(np.array([0.0]))[0]
    for k in range(n_kf - 1):
        R = geo.quat_to_matrix(q_t[k])
        dt = pre.dt[k]
        q_t[k + 1] = geo.quat_multiply(q_t[k], pre.dq[k])
        p_t[k + 1] = p_t[k] + v_t[k] * dt + 0.5 * sm.GRAVITY_W * dt**2 + R @ pre.dp[k]
        v_t[k + 1] = v_t[k] + sm.GRAVITY_W * dt + R @ pre.dv[k]
    q_t = geo.quat_normalize(q_t)

    # biases: random walk at IMU rate unless noise-free
    dt_imu = 1.0 / cfg.imu_rate_hz
    if cfg.noise_free:
        b_g_imu = np.zeros((n_imu, 3))
        b_a_imu = np.zeros((n_imu, 3))
    else:
        steps_g = rng_meas.standard_normal((n_imu - 1, 3)) * cfg.noise.gyro_bias * np.sqrt(dt_imu)
        steps_a = rng_meas.standard_normal((n_imu - 1, 3)) * cfg.noise.accel_bias * np.sqrt(dt_imu)
        b_g_imu = np.vstack([np.zeros(3), np.cumsum(steps_g, axis=0)])
        b_a_imu = np.vstack([np.zeros(3), np.cumsum(steps_a, axis=0)])

    # measurements via the forward models
    calib = cfg.truth_calibration
    w_meas = w_body @ calib.gyro.matrix().T + b_g_imu
    f_acc = geo.quat_rotate(calib.accel.q_ai, f_spec) @ calib.accel.matrix().T + b_a_imu
    if not cfg.noise_free:
        w_meas = w_meas + rng_meas.standard_normal((n_imu, 3)) * (cfg.noise.gyro / np.sqrt(dt_imu))
        f_acc = f_acc + rng_meas.standard_normal((n_imu, 3)) * (cfg.noise.accel / np.sqrt(dt_imu))
    imu = ImuData(t_imu, w_meas, f_acc)

    # landmarks and observations from the true integrated poses
    lm_pos = place_landmarks(cfg, rng_lm)
    lm_ids = np.arange(cfg.n_landmarks, dtype=np.int64)
    W, H = cfg.image_size
    obs_kf, obs_lm, obs_uv = [], [], []
    for k in range(n_kf):
        p_c, _ = sm.landmark_in_camera(lm_pos, q_t[k], p_t[k], calib.extrinsics)
        uv, valid = sm.project_cam(p_c, calib.camera)
        ok = valid & (p_c[:, 2] > 0.1) & (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
        cand = np.flatnonzero(ok)
        if len(cand) == 0:
            raise ValueError("no landmark visible from keyframe %d; scenario infeasible" % k)
        if len(cand) > cfg.max_obs_per_keyframe:
            cand = np.sort(rng_meas.choice(cand, cfg.max_obs_per_keyframe, replace=False))
        uv_k = uv[cand]
        if not cfg.noise_free:
            uv_k = uv_k + rng_meas.standard_normal(uv_k.shape) * cfg.noise.pixel
            inb = (uv_k[:, 0] >= 0) & (uv_k[:, 0] <= W - 1) & (uv_k[:, 1] >= 0) & (uv_k[:, 1] <= H - 1)
            cand, uv_k = cand[inb], uv_k[inb]
        obs_kf.append(np.full(len(cand), k, dtype=np.int64))
        obs_lm.append(cand.astype(np.int64))
        obs_uv.append(uv_k)
    obs = ObservationArray(np.concatenate(obs_kf), np.concatenate(obs_lm),
                           np.concatenate(obs_uv))

    # keyframe truth biases, then front-end-quality estimates
    b_g_kf = b_g_imu[::n_sub]
    b_a_kf = b_a_imu[::n_sub]
    truth_kf = KeyframeArray(t_kf, q_t, p_t, v_t, b_a_kf, b_g_kf)

    en = cfg.estimate_noise
    if cfg.noise_free:
        est_kf = truth_kf.copy()
        est_lm = lm_pos.copy()
    else:
        rot = np.deg2rad(en.rotation_deg) * rng_est.standard_normal((n_kf, 3))
        est_kf = KeyframeArray(
            t_kf,
            geo.quat_boxplus(q_t, rot),
            p_t + en.position * rng_est.standard_normal((n_kf, 3)),
            v_t + en.velocity * rng_est.standard_normal((n_kf, 3)),
            np.zeros((n_kf, 3)),
            np.zeros((n_kf, 3)),
        )
        est_lm = lm_pos + en.landmark * rng_est.standard_normal(lm_pos.shape)

    meta = {
        "seed": cfg.seed, "duration_s": cfg.duration_s, "motion": cfg.motion,
        "keyframe_rate_hz": cfg.keyframe_rate_hz, "imu_rate_hz": cfg.imu_rate_hz,
        "room": list(cfg.room), "n_landmarks": cfg.n_landmarks,
        "image_size": list(cfg.image_size), "noise_free": cfg.noise_free,
        "max_obs_per_keyframe": cfg.max_obs_per_keyframe,
    }
    return Dataset(meta, truth_kf, calib.copy(), lm_ids, lm_pos, est_kf, est_lm, imu, obs, cfg.noise)


def segment_stream(dataset: Dataset, segment_len_kf: int) -> list[Segment]:
    """Cut the dataset into consecutive, non-overlapping fixed-size segments.

    A trailing remainder shorter than the segment length is dropped. Each
    segment carries the estimate-quality states, its observations, and the
    IMU samples through the first keyframe of the following segment.
    """
    if segment_len_kf < 2:
        raise ValueError("segments need at least 2 keyframes")
    n_seg = dataset.n_kf // segment_len_kf
    segments = []
    est = dataset.est_kf
    for s in range(n_seg):
        lo = s * segment_len_kf
        hi = lo + segment_len_kf            # exclusive
        t_lo = est.t[lo]
        t_hi = est.t[hi] if hi < dataset.n_kf else est.t[hi - 1]
        mask = (dataset.obs.kf >= lo) & (dataset.obs.kf < hi)
        seg_obs = dataset.obs.subset(mask)
        seg_lm = np.unique(seg_obs.lm)
        lm_index = {int(g): i for i, g in enumerate(dataset.lm_ids)}
        pos = np.array([dataset.est_lm[lm_index[int(g)]] for g in seg_lm]) \
            if len(seg_lm) else np.zeros((0, 3))
        segments.append(Segment(
            id=s, first_kf=lo, keyframes=est.slice(lo, hi),
            lm_ids=seg_lm, lm_pos=pos, obs=seg_obs,
            imu=dataset.imu.window(t_lo, t_hi),
        ).freeze())
    return segments
