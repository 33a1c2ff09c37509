"""Calibration problem container and factor-graph assembly.

A :class:`Problem` holds keyframe states, landmarks and the calibration
parameters together with four factor types: preintegrated inertial factors
between consecutive keyframes, reprojection factors, bias random-walk
bridges across removed-keyframe gaps, and gauge prior factors pinning the
structurally unobservable position and yaw per connected partition.

Column conventions (shared with the solver and the information scoring):

- per-keyframe tangent: [d_phi, d_p, d_v, d_ba, d_bg] (15)
- per-landmark tangent: [d_l] (3)
- calibration tangent:  26, ordered per ``sensor_models.THETA_BLOCKS``
- full dense column order: keyframes, then landmarks, then calibration,
  calibration always rightmost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factors as fa
from . import geometry as geo
from . import sensor_models as sm
from .states import ImuData, KeyframeArray, ObservationArray

KF_DIM = 15
LM_DIM = 3

# Gauge prior weight (squared, i.e. information): 1e8. Equivalent to hard
# fixing within solver tolerances while keeping the state layout uniform.
GAUGE_SQRT_WEIGHT = 1.0e4

# Weight used for per-segment scoring problems. The calibration marginal is
# invariant to this value (the prior only removes the gauge nullspace, which
# has no calibration component); a softer prior keeps the dense information
# matrix better conditioned.
SCORING_GAUGE_SQRT_WEIGHT = 1.0e3


class ProblemStructureError(ValueError):
    """Raised when factors reference missing states or break the layout."""


@dataclass
class GaugeFix:
    kf: int
    anchor_q: np.ndarray
    anchor_p: np.ndarray
    sqrt_weight: float = GAUGE_SQRT_WEIGHT


@dataclass
class Problem:
    """Factor graph over keyframes, landmarks and calibration parameters."""

    keyframes: KeyframeArray
    lm_ids: np.ndarray
    lm_pos: np.ndarray
    calib: sm.CalibrationParams
    noise: sm.NoiseSpec
    obs_kf: np.ndarray            # (n_obs,) local keyframe index
    obs_lm: np.ndarray            # (n_obs,) local landmark index
    obs_uv: np.ndarray            # (n_obs, 2)
    int_start: np.ndarray         # (n_int,) inertial factor between i and i+1
    int_t: np.ndarray             # (n_int, m) IMU sample times
    int_w: np.ndarray             # (n_int, m, 3)
    int_a: np.ndarray             # (n_int, m, 3)
    bridge_start: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bridge_dt: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gauges: list[GaugeFix] = field(default_factory=list)
    fixed_theta: np.ndarray = field(default_factory=lambda: np.zeros(sm.THETA_DIM, dtype=bool))
    kf_stream_ids: np.ndarray | None = None
    gravity: np.ndarray = field(default_factory=lambda: sm.GRAVITY_W.copy())

    def __post_init__(self):
        K, M = len(self.keyframes), len(self.lm_ids)
        self.obs_kf = np.asarray(self.obs_kf, dtype=np.int64)
        self.obs_lm = np.asarray(self.obs_lm, dtype=np.int64)
        self.int_start = np.asarray(self.int_start, dtype=np.int64)
        self.bridge_start = np.asarray(self.bridge_start, dtype=np.int64)
        if len(self.obs_kf) and (self.obs_kf.min() < 0 or self.obs_kf.max() >= K):
            raise ProblemStructureError("observation references a missing keyframe")
        if len(self.obs_lm) and (self.obs_lm.min() < 0 or self.obs_lm.max() >= M):
            raise ProblemStructureError("observation references a missing landmark")
        if len(self.int_start) and (self.int_start.min() < 0 or self.int_start.max() >= K - 1):
            raise ProblemStructureError("inertial factor references a missing keyframe")
        if len(self.bridge_start) and (self.bridge_start.min() < 0 or self.bridge_start.max() >= K - 1):
            raise ProblemStructureError("bias bridge references a missing keyframe")
        for g in self.gauges:
            if not 0 <= g.kf < K:
                raise ProblemStructureError("gauge fix references a missing keyframe")

    @property
    def n_kf(self):
        return len(self.keyframes)

    @property
    def n_lm(self):
        return len(self.lm_ids)

    @property
    def n_obs(self):
        return len(self.obs_kf)

    def state_dim(self):
        return KF_DIM * self.n_kf + LM_DIM * self.n_lm + sm.THETA_DIM

    def theta_offset(self):
        return KF_DIM * self.n_kf + LM_DIM * self.n_lm

    # -- state snapshot/restore used by the optimizer ---------------------

    def save_state(self):
        return (
            self.keyframes.copy(),
            self.lm_pos.copy(),
            self.calib.copy(),
        )

    def restore_state(self, snap):
        kf, lm, calib = snap
        self.keyframes = kf.copy()
        self.lm_pos = lm.copy()
        self.calib = calib.copy()

    def apply_step(self, d_kf, d_lm, d_theta):
        """Retract tangent steps on all states (right-local on rotations)."""
        kf = self.keyframes
        kf.q = geo.quat_boxplus(kf.q, d_kf[:, 0:3])
        kf.p = kf.p + d_kf[:, 3:6]
        kf.v = kf.v + d_kf[:, 6:9]
        kf.b_a = kf.b_a + d_kf[:, 9:12]
        kf.b_g = kf.b_g + d_kf[:, 12:15]
        self.lm_pos = self.lm_pos + d_lm
        d_theta = np.where(self.fixed_theta, 0.0, d_theta)
        self.calib = self.calib.boxplus(d_theta)

    # -- connectivity ------------------------------------------------------

    def inertial_components(self):
        """Connected components of keyframes under inertial/bridge factors."""
        parent = list(range(self.n_kf))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in list(self.int_start) + list(self.bridge_start):
            a, b = find(int(i)), find(int(i) + 1)
            if a != b:
                parent[a] = b
        comp = {}
        for i in range(self.n_kf):
            comp.setdefault(find(i), []).append(i)
        return list(comp.values())


def fix_gauge(problem: Problem, kf: int, sqrt_weight: float = GAUGE_SQRT_WEIGHT):
    """Hold position and yaw of one keyframe via a strong prior factor.

    Raises if another gauge fix already exists in the same inertially
    connected component.
    """
    if not 0 <= kf < problem.n_kf:
        raise ProblemStructureError("gauge keyframe %d does not exist" % kf)
    comps = problem.inertial_components()
    mine = next(c for c in comps if kf in c)
    for g in problem.gauges:
        if g.kf in mine:
            raise ProblemStructureError(
                "partition already gauge-fixed at keyframe %d" % g.kf
            )
    problem.gauges.append(
        GaugeFix(kf, problem.keyframes.q[kf].copy(), problem.keyframes.p[kf].copy(), sqrt_weight)
    )


def _interval_windows(imu: ImuData, t_kf, skip=()):
    """Slice per-interval IMU windows; every kept interval must be covered."""
    idx = np.searchsorted(imu.t, np.asarray(t_kf) - 1e-9)
    if np.any(idx >= len(imu.t)) or np.any(np.abs(imu.t[np.minimum(idx, len(imu.t) - 1)] - t_kf) > 1e-6):
        raise ProblemStructureError("IMU stream does not contain samples at keyframe times")
    starts, tt, ww, aa = [], [], [], []
    m_ref = None
    for i in range(len(t_kf) - 1):
        if i in skip:
            continue
        lo, hi = idx[i], idx[i + 1]
        m = hi - lo + 1
        if m < 2:
            raise ProblemStructureError("empty IMU interval between keyframes %d and %d" % (i, i + 1))
        if m_ref is None:
            m_ref = m
        elif m != m_ref:
            raise ProblemStructureError("IMU intervals have inconsistent sample counts")
        starts.append(i)
        tt.append(imu.t[lo:hi + 1])
        ww.append(imu.w[lo:hi + 1])
        aa.append(imu.a[lo:hi + 1])
    if not starts:
        return (np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2, 3)), np.zeros((0, 2, 3)))
    return (np.array(starts, dtype=np.int64), np.stack(tt), np.stack(ww), np.stack(aa))


def build_problem(keyframes: KeyframeArray, imu: ImuData, obs: ObservationArray,
                  lm_ids, lm_pos, calib: sm.CalibrationParams, noise: sm.NoiseSpec,
                  *, chain_breaks=(), bridges=(), gauge_kfs=(0,),
                  gauge_weight: float = GAUGE_SQRT_WEIGHT, min_track: int = 2,
                  kf_stream_ids=None) -> Problem:
    """Assemble a Problem from state estimates and measurements.

    obs.kf must already hold local keyframe indices. Landmarks observed
    fewer than ``min_track`` times are dropped together with their
    observations (a single view constrains neither the landmark nor the
    calibration). ``chain_breaks``/``bridges`` are local interval indices i
    (between keyframes i and i+1) without inertial coverage; bridges get a
    bias random-walk factor.
    """
    lm_ids = np.asarray(lm_ids, dtype=np.int64)
    lm_pos = np.asarray(lm_pos, dtype=float)
    keep_obs = np.ones(len(obs), dtype=bool)
    if min_track > 1 and len(obs):
        ids, counts = np.unique(obs.lm, return_counts=True)
        weak = set(ids[counts < min_track])
        if weak:
            keep_obs = ~np.isin(obs.lm, list(weak))
    obs_kept = obs.subset(keep_obs)

    used = np.unique(obs_kept.lm)
    id_to_local = {int(g): i for i, g in enumerate(used)}
    lm_lookup = {int(g): i for i, g in enumerate(lm_ids)}
    missing = [g for g in used if int(g) not in lm_lookup]
    if missing:
        raise ProblemStructureError("observations reference unknown landmarks: %s" % missing[:5])
    local_pos = np.array([lm_pos[lm_lookup[int(g)]] for g in used]) if len(used) else np.zeros((0, 3))
    obs_lm_local = np.array([id_to_local[int(g)] for g in obs_kept.lm], dtype=np.int64)

    int_start, int_t, int_w, int_a = _interval_windows(imu, keyframes.t, skip=set(chain_breaks))

    bridge_start = np.array(sorted(bridges), dtype=np.int64)
    bridge_dt = keyframes.t[bridge_start + 1] - keyframes.t[bridge_start] if len(bridge_start) else np.zeros(0)
    if np.any(bridge_dt <= 0.0):
        raise ProblemStructureError("bias bridge over a non-positive time gap")

    problem = Problem(
        keyframes=keyframes.copy(),
        lm_ids=used,
        lm_pos=local_pos,
        calib=calib.copy(),
        noise=noise,
        obs_kf=obs_kept.kf,
        obs_lm=obs_lm_local,
        obs_uv=obs_kept.uv.copy(),
        int_start=int_start,
        int_t=int_t,
        int_w=int_w,
        int_a=int_a,
        bridge_start=bridge_start,
        bridge_dt=np.asarray(bridge_dt, dtype=float),
        kf_stream_ids=None if kf_stream_ids is None else np.asarray(kf_stream_ids, dtype=np.int64),
    )
    for k in gauge_kfs:
        fix_gauge(problem, int(k), gauge_weight)
    return problem


@dataclass
class FactorBlocks:
    """Whitened residuals and Jacobian blocks of every factor in a problem."""

    cost: float
    # inertial
    in_idx: np.ndarray
    in_r: np.ndarray              # (n_int, 15)
    in_Ji: np.ndarray | None      # (n_int, 15, 15)
    in_Jj: np.ndarray | None
    in_Jt: np.ndarray | None      # theta_i block (cols 11:26 of theta)
    # reprojection
    rp_kf: np.ndarray
    rp_lm: np.ndarray
    rp_r: np.ndarray              # (n_obs, 2)
    rp_Jx: np.ndarray | None      # (n_obs, 2, 6) pose block
    rp_Jl: np.ndarray | None      # (n_obs, 2, 3)
    rp_Jt: np.ndarray | None      # (n_obs, 2, 11) theta_c block (cols 0:11)
    rp_active: np.ndarray
    # bias bridges
    br_idx: np.ndarray
    br_r: np.ndarray              # (n_b, 6)
    br_w: np.ndarray              # (n_b, 6) sqrt information diagonal
    # gauge priors
    ga_kf: np.ndarray
    ga_r: np.ndarray              # (n_g, 4)
    ga_J: np.ndarray              # (n_g, 4, 6)
    n_deactivated: int = 0


def inertial_sqrt_information(problem: Problem) -> np.ndarray:
    """Whitening factors L^-1 (lower) of the inertial covariances.

    Computed at the problem's current bias and intrinsics estimates.
    """
    if len(problem.int_start) == 0:
        return np.zeros((0, KF_DIM, KF_DIM))
    i = problem.int_start
    pre = fa.preintegrate_batch(
        problem.int_t, problem.int_w, problem.int_a,
        problem.keyframes.b_g[i], problem.keyframes.b_a[i],
        problem.calib.gyro, problem.calib.accel, problem.noise, with_cov=True,
    )
    L = np.linalg.cholesky(pre.cov)
    return np.linalg.inv(L)


def evaluate_factors(problem: Problem, linv15=None, with_jacobians=True) -> FactorBlocks:
    """Evaluate all factors at the problem's current state.

    linv15 optionally supplies frozen inertial whitening matrices (the
    optimizer freezes them at its initial linearization point so that the
    cost function is fixed across iterations).
    """
    kf = problem.keyframes
    cost = 0.0

    # inertial factors
    i = problem.int_start
    n_int = len(i)
    if n_int:
        pre = fa.preintegrate_batch(
            problem.int_t, problem.int_w, problem.int_a,
            kf.b_g[i], kf.b_a[i], problem.calib.gyro, problem.calib.accel,
            problem.noise, with_cov=linv15 is None,
        )
        if linv15 is None:
            L = np.linalg.cholesky(pre.cov)
            linv15 = np.linalg.inv(L)
        j = i + 1
        r, Ji, Jj, Jt = fa.inertial_residuals(
            pre, kf.q[i], kf.p[i], kf.v[i], kf.b_a[i], kf.b_g[i],
            kf.q[j], kf.p[j], kf.v[j], kf.b_a[j], kf.b_g[j],
            gravity=problem.gravity, with_jacobians=with_jacobians,
        )
        in_r = np.einsum("nij,nj->ni", linv15, r)
        if with_jacobians:
            in_Ji = linv15 @ Ji
            in_Jj = linv15 @ Jj
            in_Jt = linv15 @ Jt
        else:
            in_Ji = in_Jj = in_Jt = None
        cost += float(np.sum(in_r**2))
    else:
        in_r = np.zeros((0, KF_DIM))
        in_Ji = in_Jj = in_Jt = np.zeros((0, KF_DIM, KF_DIM)) if with_jacobians else None

    # reprojection factors
    n_obs = problem.n_obs
    if n_obs:
        jac = sm.project_jacobians(
            problem.lm_pos[problem.obs_lm], kf.q[problem.obs_kf], kf.p[problem.obs_kf],
            problem.calib.extrinsics, problem.calib.camera,
        )
        inv_sigma = 1.0 / problem.noise.pixel
        active = jac["valid"]
        rp_r = (problem.obs_uv - jac["uv"]) * inv_sigma
        rp_r[~active] = 0.0
        if with_jacobians:
            rp_Jx = np.concatenate([jac["d_theta"], jac["d_p"]], axis=2) * (-inv_sigma)
            rp_Jl = jac["d_l"] * (-inv_sigma)
            rp_Jt = np.concatenate(
                [jac["d_qci"], jac["d_pci"], jac["d_f"], jac["d_c"], jac["d_w"]], axis=2
            ) * (-inv_sigma)
            rp_Jx[~active] = 0.0
            rp_Jl[~active] = 0.0
            rp_Jt[~active] = 0.0
        else:
            rp_Jx = rp_Jl = rp_Jt = None
        cost += float(np.sum(rp_r**2))
        n_deact = int(np.sum(~active))
    else:
        rp_r = np.zeros((0, 2))
        rp_Jx = rp_Jl = rp_Jt = None
        active = np.zeros(0, dtype=bool)
        n_deact = 0

    # bias bridges
    nb = len(problem.bridge_start)
    if nb:
        bi = problem.bridge_start
        bj = bi + 1
        w_a = 1.0 / (problem.noise.accel_bias * np.sqrt(problem.bridge_dt))
        w_g = 1.0 / (problem.noise.gyro_bias * np.sqrt(problem.bridge_dt))
        br_w = np.concatenate([np.repeat(w_a[:, None], 3, axis=1),
                               np.repeat(w_g[:, None], 3, axis=1)], axis=1)
        br_r = np.concatenate([kf.b_a[bj] - kf.b_a[bi], kf.b_g[bj] - kf.b_g[bi]], axis=1) * br_w
        cost += float(np.sum(br_r**2))
    else:
        br_r = np.zeros((0, 6))
        br_w = np.zeros((0, 6))

    # gauge priors
    ga_kf = np.array([g.kf for g in problem.gauges], dtype=np.int64)
    ga_r = np.zeros((len(problem.gauges), 4))
    ga_J = np.zeros((len(problem.gauges), 4, 6))
    for gi, g in enumerate(problem.gauges):
        r, J = fa.gauge_prior_eval(kf.q[g.kf], kf.p[g.kf], g.anchor_q, g.anchor_p, g.sqrt_weight)
        ga_r[gi] = r
        ga_J[gi] = J
        cost += float(np.sum(r**2))

    return FactorBlocks(
        cost=cost,
        in_idx=i, in_r=in_r, in_Ji=in_Ji, in_Jj=in_Jj, in_Jt=in_Jt,
        rp_kf=problem.obs_kf, rp_lm=problem.obs_lm, rp_r=rp_r,
        rp_Jx=rp_Jx, rp_Jl=rp_Jl, rp_Jt=rp_Jt, rp_active=active,
        br_idx=problem.bridge_start, br_r=br_r, br_w=br_w,
        ga_kf=ga_kf, ga_r=ga_r, ga_J=ga_J, n_deactivated=n_deact,
    )


def problem_cost(problem: Problem, linv15=None) -> float:
    return evaluate_factors(problem, linv15=linv15, with_jacobians=False).cost


def dense_whitened_system(problem: Problem, linv15=None):
    """Stack the full whitened Jacobian and residual as dense arrays.

    Columns are ordered keyframes, landmarks, calibration (calibration
    rightmost). Intended for per-segment problems and test oracles; the
    batch solver never forms this matrix.
    """
    fb = evaluate_factors(problem, linv15=linv15)
    K, M = problem.n_kf, problem.n_lm
    n_cols = problem.state_dim()
    th0 = problem.theta_offset()
    rows = 15 * len(fb.in_idx) + 2 * problem.n_obs + 6 * len(fb.br_idx) + 4 * len(fb.ga_kf)
    J = np.zeros((rows, n_cols))
    r = np.zeros(rows)
    off = 0
    for n, idx in enumerate(fb.in_idx):
        sl = slice(off + 15 * n, off + 15 * (n + 1))
        J[sl, KF_DIM * idx:KF_DIM * (idx + 1)] = fb.in_Ji[n]
        J[sl, KF_DIM * (idx + 1):KF_DIM * (idx + 2)] = fb.in_Jj[n]
        J[sl, th0 + 11:th0 + 26] = fb.in_Jt[n]
        r[sl] = fb.in_r[n]
    off += 15 * len(fb.in_idx)
    for n in range(problem.n_obs):
        sl = slice(off + 2 * n, off + 2 * (n + 1))
        k, l = fb.rp_kf[n], fb.rp_lm[n]
        J[sl, KF_DIM * k:KF_DIM * k + 6] = fb.rp_Jx[n]
        J[sl, KF_DIM * K + LM_DIM * l:KF_DIM * K + LM_DIM * (l + 1)] = fb.rp_Jl[n]
        J[sl, th0:th0 + 11] = fb.rp_Jt[n]
        r[sl] = fb.rp_r[n]
    off += 2 * problem.n_obs
    for n, idx in enumerate(fb.br_idx):
        sl = slice(off + 6 * n, off + 6 * (n + 1))
        w = fb.br_w[n]
        J[sl, KF_DIM * idx + 9:KF_DIM * idx + 15] = -np.diag(w)
        J[sl, KF_DIM * (idx + 1) + 9:KF_DIM * (idx + 1) + 15] = np.diag(w)
        r[sl] = fb.br_r[n]
    off += 6 * len(fb.br_idx)
    for n, k in enumerate(fb.ga_kf):
        sl = slice(off + 4 * n, off + 4 * (n + 1))
        J[sl, KF_DIM * k:KF_DIM * k + 6] = fb.ga_J[n]
        r[sl] = fb.ga_r[n]
    return J, r


def snapshot_dict(problem: Problem):
    """JSON-serializable snapshot of states, factors and calibration."""
    kf = problem.keyframes
    return {
        "version": 1,
        "keyframes": {
            "t": kf.t.tolist(),
            "q": geo.quat_canonical(kf.q).tolist(),
            "p": kf.p.tolist(),
            "v": kf.v.tolist(),
            "b_a": kf.b_a.tolist(),
            "b_g": kf.b_g.tolist(),
        },
        "landmarks": {"ids": problem.lm_ids.tolist(), "pos": problem.lm_pos.tolist()},
        "calibration": problem.calib.to_json_dict(),
        "noise": {
            "gyro": problem.noise.gyro, "gyro_bias": problem.noise.gyro_bias,
            "accel": problem.noise.accel, "accel_bias": problem.noise.accel_bias,
            "pixel": problem.noise.pixel,
        },
        "observations": {
            "kf": problem.obs_kf.tolist(), "lm": problem.obs_lm.tolist(),
            "uv": problem.obs_uv.tolist(),
        },
        "inertial": {
            "start": problem.int_start.tolist(), "t": problem.int_t.tolist(),
            "w": problem.int_w.tolist(), "a": problem.int_a.tolist(),
        },
        "bridges": {"start": problem.bridge_start.tolist(), "dt": problem.bridge_dt.tolist()},
        "gauges": [
            {"kf": int(g.kf), "q": geo.quat_canonical(g.anchor_q).tolist(),
             "p": g.anchor_p.tolist(), "sqrt_weight": g.sqrt_weight}
            for g in problem.gauges
        ],
        "fixed_theta": problem.fixed_theta.tolist(),
    }


def problem_from_snapshot(d) -> Problem:
    kfd = d["keyframes"]
    nd = d["noise"]
    problem = Problem(
        keyframes=KeyframeArray(
            np.array(kfd["t"]), np.array(kfd["q"]), np.array(kfd["p"]),
            np.array(kfd["v"]), np.array(kfd["b_a"]), np.array(kfd["b_g"]),
        ),
        lm_ids=np.array(d["landmarks"]["ids"], dtype=np.int64),
        lm_pos=np.array(d["landmarks"]["pos"], dtype=float).reshape(-1, 3),
        calib=sm.CalibrationParams.from_json_dict(d["calibration"]),
        noise=sm.NoiseSpec(nd["gyro"], nd["gyro_bias"], nd["accel"], nd["accel_bias"], nd["pixel"]),
        obs_kf=np.array(d["observations"]["kf"], dtype=np.int64),
        obs_lm=np.array(d["observations"]["lm"], dtype=np.int64),
        obs_uv=np.array(d["observations"]["uv"], dtype=float).reshape(-1, 2),
        int_start=np.array(d["inertial"]["start"], dtype=np.int64),
        int_t=np.array(d["inertial"]["t"], dtype=float),
        int_w=np.array(d["inertial"]["w"], dtype=float),
        int_a=np.array(d["inertial"]["a"], dtype=float),
        bridge_start=np.array(d["bridges"]["start"], dtype=np.int64),
        bridge_dt=np.array(d["bridges"]["dt"], dtype=float),
        fixed_theta=np.array(d["fixed_theta"], dtype=bool),
    )
    for g in d["gauges"]:
        problem.gauges.append(
            GaugeFix(int(g["kf"]), np.array(g["q"]), np.array(g["p"]), float(g["sqrt_weight"]))
        )
    return problem
