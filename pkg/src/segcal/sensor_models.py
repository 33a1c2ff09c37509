"""Forward measurement models for gyroscope, accelerometer and fisheye camera.

Frames: G is a gravity-aligned world frame (e_z up, g = (0, 0, -9.80665)),
I the gyroscope (body) frame, A the accelerometer frame (rotated from I by
q_AI), C the camera frame (T_CI = (q_CI, p_CI) maps I to C).

Measurement models (noise added only by the simulator):

    gyro:   w~ = T_g @ w_I + b_g
    accel:  a~ = T_a @ R(q_AI) @ R_IG @ (a_G - g) + b_a
    camera: z  = f (.) distort(x/z, y/z) + c        for the landmark in C

T_g and T_a are upper-triangular 3x3 matrices carrying per-axis scale
factors on the diagonal and the three misalignment terms above it.
The distortion is the one-parameter field-of-view model: a point at
normalized radius r maps to r_d = atan(2 r tan(w/2)) / w.

All calibration degrees of freedom live in :class:`CalibrationParams`; its
26-dim tangent ordering is defined by ``THETA_BLOCKS`` and shared by the
estimator, the information scoring and all reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

GRAVITY_W = np.array([0.0, 0.0, -9.80665])

# Landmarks closer than this to the image plane are treated as invisible.
Z_MIN = 1e-6

# Tangent layout of the full calibration vector, in column order.
THETA_BLOCKS = (
    ("q_ci", 3),
    ("p_ci", 3),
    ("f", 2),
    ("c", 2),
    ("w", 1),
    ("s_g", 3),
    ("m_g", 3),
    ("s_a", 3),
    ("m_a", 3),
    ("q_ai", 3),
)

THETA_DIM = sum(d for _, d in THETA_BLOCKS)


def theta_index():
    """Name -> column indices of the calibration tangent vector."""
    out = {}
    off = 0
    for name, dim in THETA_BLOCKS:
        out[name] = list(range(off, off + dim))
        off += dim
    return out


THETA_INDEX = theta_index()


@dataclass
class WorldModel:
    """World constants; the frame G is gravity aligned by construction."""

    g: np.ndarray = field(default_factory=lambda: GRAVITY_W.copy())


@dataclass
class NoiseSpec:
    """Continuous-time noise densities plus the pixel noise std.

    gyro        rad/s/sqrt(Hz)
    gyro_bias   rad/s^2/sqrt(Hz)
    accel       m/s^2/sqrt(Hz)
    accel_bias  m/s^3/sqrt(Hz)
    pixel       px
    """

    gyro: float = 2.0e-3
    gyro_bias: float = 3.0e-5
    accel: float = 1.5e-2
    accel_bias: float = 5.0e-4
    pixel: float = 0.75

    def __post_init__(self):
        for name in ("gyro", "gyro_bias", "accel", "accel_bias", "pixel"):
            if getattr(self, name) <= 0.0:
                raise ValueError("noise density %r must be positive" % name)


def triad_matrix(s, m):
    """Upper-triangular intrinsic matrix from scales s and misalignments m."""
    s = np.asarray(s, dtype=float)
    m = np.asarray(m, dtype=float)
    return np.array(
        [
            [s[0], m[0], m[1]],
            [0.0, s[1], m[2]],
            [0.0, 0.0, s[2]],
        ]
    )


def triad_params(T):
    """Inverse of :func:`triad_matrix` (exact round trip)."""
    T = np.asarray(T, dtype=float)
    s = np.array([T[0, 0], T[1, 1], T[2, 2]])
    m = np.array([T[0, 1], T[0, 2], T[1, 2]])
    return s, m


def _triad_apply_jacobian(v):
    """d(T w)/d[s, m] for fixed w = v, shape (..., 3, 6)."""
    v = np.asarray(v, dtype=float)
    J = np.zeros(v.shape[:-1] + (3, 6))
    J[..., 0, 0] = v[..., 0]
    J[..., 1, 1] = v[..., 1]
    J[..., 2, 2] = v[..., 2]
    J[..., 0, 3] = v[..., 1]
    J[..., 0, 4] = v[..., 2]
    J[..., 1, 5] = v[..., 2]
    return J


@dataclass
class GyroIntrinsics:
    s_g: np.ndarray = field(default_factory=lambda: np.ones(3))
    m_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.s_g = np.asarray(self.s_g, dtype=float)
        self.m_g = np.asarray(self.m_g, dtype=float)
        if np.any(self.s_g <= 0.0):
            raise ValueError("gyro scale factors must be positive")

    def matrix(self):
        return triad_matrix(self.s_g, self.m_g)


@dataclass
class AccelIntrinsics:
    s_a: np.ndarray = field(default_factory=lambda: np.ones(3))
    m_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_ai: np.ndarray = field(default_factory=geo.quat_identity)

    def __post_init__(self):
        self.s_a = np.asarray(self.s_a, dtype=float)
        self.m_a = np.asarray(self.m_a, dtype=float)
        self.q_ai = geo.quat_normalize(self.q_ai)
        if np.any(self.s_a <= 0.0):
            raise ValueError("accel scale factors must be positive")

    def matrix(self):
        return triad_matrix(self.s_a, self.m_a)


@dataclass
class CameraIntrinsics:
    f: np.ndarray = field(default_factory=lambda: np.array([255.0, 255.0]))
    c: np.ndarray = field(default_factory=lambda: np.array([320.0, 240.0]))
    w: float = 0.92

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.w = float(self.w)
        if np.any(self.f <= 0.0):
            raise ValueError("focal lengths must be positive")
        if not 0.0 < self.w < np.pi:
            raise ValueError("FOV parameter must be in (0, pi)")


@dataclass
class CameraExtrinsics:
    q_ci: np.ndarray = field(default_factory=geo.quat_identity)
    p_ci: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q_ci = geo.quat_normalize(self.q_ci)
        self.p_ci = np.asarray(self.p_ci, dtype=float)


@dataclass
class CalibrationParams:
    """All 26 calibration degrees of freedom being estimated."""

    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)
    gyro: GyroIntrinsics = field(default_factory=GyroIntrinsics)
    accel: AccelIntrinsics = field(default_factory=AccelIntrinsics)

    def copy(self) -> "CalibrationParams":
        return CalibrationParams(
            CameraIntrinsics(self.camera.f.copy(), self.camera.c.copy(), self.camera.w),
            CameraExtrinsics(self.extrinsics.q_ci.copy(), self.extrinsics.p_ci.copy()),
            GyroIntrinsics(self.gyro.s_g.copy(), self.gyro.m_g.copy()),
            AccelIntrinsics(self.accel.s_a.copy(), self.accel.m_a.copy(), self.accel.q_ai.copy()),
        )

    def boxplus(self, delta) -> "CalibrationParams":
        """Retract a 26-dim tangent step, ordered per THETA_BLOCKS."""
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (THETA_DIM,):
            raise ValueError("delta must have shape (%d,)" % THETA_DIM)
        i = THETA_INDEX
        return CalibrationParams(
            CameraIntrinsics(
                self.camera.f + delta[i["f"]],
                self.camera.c + delta[i["c"]],
                self.camera.w + delta[i["w"]][0],
            ),
            CameraExtrinsics(
                geo.quat_boxplus(self.extrinsics.q_ci, delta[i["q_ci"]]),
                self.extrinsics.p_ci + delta[i["p_ci"]],
            ),
            GyroIntrinsics(self.gyro.s_g + delta[i["s_g"]], self.gyro.m_g + delta[i["m_g"]]),
            AccelIntrinsics(
                self.accel.s_a + delta[i["s_a"]],
                self.accel.m_a + delta[i["m_a"]],
                geo.quat_boxplus(self.accel.q_ai, delta[i["q_ai"]]),
            ),
        )

    def boxminus(self, other: "CalibrationParams"):
        """26-dim tangent difference self (-) other."""
        out = np.zeros(THETA_DIM)
        i = THETA_INDEX
        out[i["q_ci"]] = geo.quat_boxminus(self.extrinsics.q_ci, other.extrinsics.q_ci)
        out[i["p_ci"]] = self.extrinsics.p_ci - other.extrinsics.p_ci
        out[i["f"]] = self.camera.f - other.camera.f
        out[i["c"]] = self.camera.c - other.camera.c
        out[i["w"]] = self.camera.w - other.camera.w
        out[i["s_g"]] = self.gyro.s_g - other.gyro.s_g
        out[i["m_g"]] = self.gyro.m_g - other.gyro.m_g
        out[i["s_a"]] = self.accel.s_a - other.accel.s_a
        out[i["m_a"]] = self.accel.m_a - other.accel.m_a
        out[i["q_ai"]] = geo.quat_boxminus(self.accel.q_ai, other.accel.q_ai)
        return out

    # Flat JSON serialization; key order is the documented block order.
    _JSON_KEYS = ("q_ci", "p_ci", "f", "c", "w", "s_g", "m_g", "s_a", "m_a", "q_ai")

    def to_json_dict(self):
        q_ci = geo.quat_canonical(self.extrinsics.q_ci)
        q_ai = geo.quat_canonical(self.accel.q_ai)
        return {
            "q_ci": list(q_ci),
            "p_ci": list(self.extrinsics.p_ci),
            "f": list(self.camera.f),
            "c": list(self.camera.c),
            "w": self.camera.w,
            "s_g": list(self.gyro.s_g),
            "m_g": list(self.gyro.m_g),
            "s_a": list(self.accel.s_a),
            "m_a": list(self.accel.m_a),
            "q_ai": list(q_ai),
        }

    @classmethod
    def from_json_dict(cls, d) -> "CalibrationParams":
        return cls(
            CameraIntrinsics(np.array(d["f"]), np.array(d["c"]), float(d["w"])),
            CameraExtrinsics(np.array(d["q_ci"]), np.array(d["p_ci"])),
            GyroIntrinsics(np.array(d["s_g"]), np.array(d["m_g"])),
            AccelIntrinsics(np.array(d["s_a"]), np.array(d["m_a"]), np.array(d["q_ai"])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s: str) -> "CalibrationParams":
        return cls.from_json_dict(json.loads(s))


def gyro_measure(omega_i, intr: GyroIntrinsics, b_g):
    """Noise-free gyro measurement T_g w + b_g, batched over leading axes."""
    Tg = intr.matrix()
    return np.asarray(omega_i, dtype=float) @ Tg.T + np.asarray(b_g, dtype=float)


def accel_measure(a_w, q_ig, intr: AccelIntrinsics, b_a, world: WorldModel | None = None):
    """Noise-free specific-force measurement.

    a_w is the body acceleration expressed in G, q_ig the rotation taking
    G-frame vectors into the gyro frame I (the inverse of the attitude).
    """
    g = GRAVITY_W if world is None else world.g
    f_i = geo.quat_rotate(q_ig, np.asarray(a_w, dtype=float) - g)
    f_a = geo.quat_rotate(intr.q_ai, f_i)
    return f_a @ intr.matrix().T + np.asarray(b_a, dtype=float)


def gyro_jacobians(omega_i, intr: GyroIntrinsics, b_g):
    """Jacobians of the gyro measurement w.r.t. inputs and intrinsics."""
    omega_i = np.asarray(omega_i, dtype=float)
    Tg = intr.matrix()
    lead = omega_i.shape[:-1]
    return {
        "d_omega": np.broadcast_to(Tg, lead + (3, 3)),
        "d_bg": np.broadcast_to(np.eye(3), lead + (3, 3)),
        "d_sg_mg": _triad_apply_jacobian(omega_i),
    }


def accel_jacobians(a_w, q_ig, intr: AccelIntrinsics, b_a, world: WorldModel | None = None):
    """Jacobians of the accel measurement.

    d_theta_ig is w.r.t. a right-local perturbation of q_ig.
    d_qai is w.r.t. a right-local perturbation of q_ai.
    """
    g = GRAVITY_W if world is None else world.g
    a_w = np.asarray(a_w, dtype=float)
    f_i = geo.quat_rotate(q_ig, a_w - g)
    f_a = geo.quat_rotate(intr.q_ai, f_i)
    Ta = intr.matrix()
    Rai = geo.quat_to_matrix(intr.q_ai)
    Rig = geo.quat_to_matrix(q_ig)
    TR = Ta @ Rai
    lead = a_w.shape[:-1]
    return {
        "d_aw": np.broadcast_to(TR @ Rig, lead + (3, 3)) if Rig.ndim == 2 else TR @ Rig,
        # q_ig (+) d: R(q exp(d)) u = R (I + [d]x) u  ->  d/dd = -R [u]x = -[f_i]x R
        "d_theta_ig": -np.einsum("ij,...jk->...ik", TR, geo.skew(f_i) @ Rig if Rig.ndim == 2
                                 else np.einsum("...ij,...jk->...ik", geo.skew(f_i), Rig)),
        "d_ba": np.broadcast_to(np.eye(3), lead + (3, 3)),
        "d_sa_ma": _triad_apply_jacobian(f_a),
        "d_qai": -np.einsum("ij,...jk->...ik", Ta,
                            np.einsum("...ij,jk->...ik", geo.skew(f_a), Rai)),
        "f_i": f_i,
    }


def fov_distort(r, w):
    """Distorted radius atan(2 r tan(w/2)) / w with the small-w limit."""
    r = np.asarray(r, dtype=float)
    if w < 1e-6:
        return r * (1.0 + w * w * (1.0 - 4.0 * r * r) / 12.0)
    return np.arctan(2.0 * r * np.tan(0.5 * w)) / w


def fov_undistort(r_d, w):
    """Exact inverse of :func:`fov_distort`."""
    r_d = np.asarray(r_d, dtype=float)
    if w < 1e-6:
        return r_d * (1.0 - w * w * (1.0 - 4.0 * r_d * r_d) / 12.0)
    return np.tan(r_d * w) / (2.0 * np.tan(0.5 * w))


def _fov_factor_terms(r2, w):
    """Distortion factor s = r_d / r and s'(r)/r as functions of r^2.

    Both are even in r, so they stay finite at r = 0; series are used below
    r ~ 1e-6 and for w -> 0.
    """
    r2 = np.asarray(r2, dtype=float)
    if w < 1e-6:
        s = 1.0 + w * w * (1.0 - 4.0 * r2) / 12.0
        sp_r = -2.0 * w * w / 3.0 * np.ones_like(r2)
        return s, sp_r
    T = np.tan(0.5 * w)
    r = np.sqrt(r2)
    u = 2.0 * r * T
    g = np.arctan(u) / w
    gp = (2.0 * T / w) / (1.0 + u * u)
    small = r < 1e-6
    safe_r = np.where(small, 1.0, r)
    s = np.where(small, 2.0 * T / w * (1.0 - 4.0 * r2 * T * T / 3.0), g / safe_r)
    sp_r = np.where(small, -16.0 * T**3 / (3.0 * w), (gp * safe_r - g) / safe_r**3)
    return s, sp_r


def _fov_factor_dw(r2, w):
    """d s / d w at fixed r (even in r)."""
    r2 = np.asarray(r2, dtype=float)
    if w < 1e-6:
        return w * (1.0 - 4.0 * r2) / 6.0
    T = np.tan(0.5 * w)
    Tp = 0.5 * (1.0 + T * T)
    r = np.sqrt(r2)
    u = 2.0 * r * T
    small = r < 1e-6
    safe_r = np.where(small, 1.0, r)
    A = np.arctan(u)
    dsdw = (2.0 * safe_r * Tp * w / (1.0 + u * u) - A) / (w * w * safe_r)
    dsdw_small = 2.0 * (Tp * w - T) / (w * w)
    return np.where(small, dsdw_small, dsdw)


def project_cam(p_c, intr: CameraIntrinsics):
    """Project camera-frame points to pixels.

    Returns (uv, valid); points with z <= Z_MIN are flagged invalid and get
    a zero pixel.
    """
    p_c = np.asarray(p_c, dtype=float)
    z = p_c[..., 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    xn = p_c[..., 0] / zs
    yn = p_c[..., 1] / zs
    r2 = xn * xn + yn * yn
    s, _ = _fov_factor_terms(r2, intr.w)
    uv = np.stack([intr.f[0] * s * xn + intr.c[0], intr.f[1] * s * yn + intr.c[1]], axis=-1)
    return np.where(valid[..., None], uv, 0.0), valid


def project_cam_jacobians(p_c, intr: CameraIntrinsics):
    """Pixel Jacobians w.r.t. the camera-frame point and (f, c, w)."""
    p_c = np.asarray(p_c, dtype=float)
    z = p_c[..., 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    xn = p_c[..., 0] / zs
    yn = p_c[..., 1] / zs
    r2 = xn * xn + yn * yn
    s, sp_r = _fov_factor_terms(r2, intr.w)
    dsdw = _fov_factor_dw(r2, intr.w)

    # d(s v)/dv = s I + (s'/r) v v^T, v = (xn, yn)
    d00 = s + sp_r * xn * xn
    d01 = sp_r * xn * yn
    d11 = s + sp_r * yn * yn
    iz = 1.0 / zs
    # dv/dp_c rows: [1/z, 0, -x/z^2], [0, 1/z, -y/z^2]
    J_p = np.empty(p_c.shape[:-1] + (2, 3))
    J_p[..., 0, 0] = intr.f[0] * d00 * iz
    J_p[..., 0, 1] = intr.f[0] * d01 * iz
    J_p[..., 0, 2] = -intr.f[0] * (d00 * xn + d01 * yn) * iz
    J_p[..., 1, 0] = intr.f[1] * d01 * iz
    J_p[..., 1, 1] = intr.f[1] * d11 * iz
    J_p[..., 1, 2] = -intr.f[1] * (d01 * xn + d11 * yn) * iz

    J_f = np.zeros(p_c.shape[:-1] + (2, 2))
    J_f[..., 0, 0] = s * xn
    J_f[..., 1, 1] = s * yn
    J_c = np.broadcast_to(np.eye(2), p_c.shape[:-1] + (2, 2))
    J_w = np.stack([intr.f[0] * dsdw * xn, intr.f[1] * dsdw * yn], axis=-1)[..., None]
    return {"d_pc": J_p, "d_f": J_f, "d_c": J_c, "d_w": J_w, "valid": valid}


def landmark_in_camera(l_w, q_gi, p_gi, extr: CameraExtrinsics):
    """Camera-frame coordinates of world landmarks seen from pose (q_gi, p_gi)."""
    p_i = geo.quat_rotate(geo.quat_inverse(q_gi), np.asarray(l_w, dtype=float) - p_gi)
    return geo.quat_rotate(extr.q_ci, p_i) + extr.p_ci, p_i


def project(l_w, T_ig: geo.Transform, extr: CameraExtrinsics, intr: CameraIntrinsics):
    """Full projection of world landmarks given T_IG (world-to-body).

    Returns (uv, valid).
    """
    p_i = geo.transform_point(T_ig, l_w)
    p_c = geo.quat_rotate(extr.q_ci, p_i) + extr.p_ci
    return project_cam(p_c, intr)


def project_jacobians(l_w, q_gi, p_gi, extr: CameraExtrinsics, intr: CameraIntrinsics):
    """Projection and all Jacobian blocks for the reprojection factor.

    Pose perturbations are right-local on q_gi (body frame); the pixel
    prediction is returned together with the blocks:

        d_theta (2,3)  w.r.t. the attitude perturbation
        d_p     (2,3)  w.r.t. p_gi
        d_l     (2,3)  w.r.t. the landmark
        d_qci, d_pci, d_f, d_c, d_w   calibration blocks
    """
    p_c, p_i = landmark_in_camera(l_w, q_gi, p_gi, extr)
    uv, valid = project_cam(p_c, intr)
    cam = project_cam_jacobians(p_c, intr)
    J_pc = cam["d_pc"]
    R_ci = geo.quat_to_matrix(extr.q_ci)
    R_gi_t = np.swapaxes(geo.quat_to_matrix(q_gi), -1, -2)

    J_pi = np.einsum("...ij,jk->...ik", J_pc, R_ci)
    d_theta = J_pi @ geo.skew(p_i)
    d_l = J_pi @ R_gi_t if R_gi_t.ndim == 2 else np.einsum("...ij,...jk->...ik", J_pi, R_gi_t)
    d_p = -d_l
    d_qci = -np.einsum("...ij,...jk->...ik", J_pc, np.einsum("ij,...jk->...ik", R_ci, geo.skew(p_i)))
    return {
        "uv": uv,
        "valid": valid,
        "d_theta": d_theta,
        "d_p": d_p,
        "d_l": d_l,
        "d_qci": d_qci,
        "d_pci": J_pc,
        "d_f": cam["d_f"],
        "d_c": cam["d_c"],
        "d_w": cam["d_w"],
        "p_c": p_c,
    }


def backproject_ray(uv, intr: CameraIntrinsics):
    """Unit direction in the camera frame whose projection is uv."""
    uv = np.asarray(uv, dtype=float)
    d = (uv - intr.c) / intr.f
    r_d = np.linalg.norm(d, axis=-1, keepdims=True)
    small = r_d < 1e-12
    r = fov_undistort(r_d, intr.w)
    scale = np.where(small, 1.0, r / np.where(small, 1.0, r_d))
    v = d * scale
    ray = np.concatenate([v, np.ones(v.shape[:-1] + (1,))], axis=-1)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True)
