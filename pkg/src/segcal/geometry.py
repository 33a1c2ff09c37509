"""Unit-quaternion and rigid-transform primitives.

Conventions, fixed once for the whole package:

- Quaternions are scalar-first ``[w, x, y, z]`` numpy arrays and compose with
  the Hamilton product. ``q_AB`` is passive: it maps the coordinates of a
  vector expressed in frame ``B`` into frame ``A``, ``p_A = R(q_AB) @ p_B``,
  and ``R(q_AB @ q_BC) = R(q_AB) @ R(q_BC)``.
- Tangent-space perturbations are right-local, ``q (+) d = q * exp(d)`` with
  ``d`` a 3-vector (radians, body frame). Every rotation Jacobian in the
  package is laid out for this convention.
- All operations broadcast over leading axes: a quaternion is ``(..., 4)``,
  a vector ``(..., 3)``.

Only SO(3)/SE(3) functionality that the estimator actually needs lives here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Unit-norm drift tolerated before an operation is considered broken.
NORM_DRIFT_TOL = 1e-9

# Angle below which closed forms switch to their Taylor series.
_SMALL_ANGLE = 1e-8


def quat_identity():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    """Renormalize, asserting the input did not drift away from unit norm."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(np.abs(n - 1.0) > NORM_DRIFT_TOL):
        raise ValueError("quaternion norm drifted beyond %.1e" % NORM_DRIFT_TOL)
    return q / n


def quat_multiply(a, b):
    """Hamilton product a * b, broadcasting over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


# For unit quaternions the inverse is the conjugate.
quat_inverse = quat_conjugate


def quat_rotate(q, v):
    """Rotate vector(s): R(q) @ v."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_matrix(R):
    """Shepperd's method, single matrix only."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_canonical(q / np.linalg.norm(q))


def quat_canonical(q):
    """Resolve the double cover: flip sign so that w >= 0."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_exp(phi):
    """SO(3) exponential map to a unit quaternion (full rotation angle)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    # sin(theta/2)/theta with series fallback near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    return np.concatenate([w, k * phi], axis=-1)


def quat_log(q):
    """Rotation-vector logarithm, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = quat_canonical(q)
    w = q[..., :1]
    v = q[..., 1:]
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    small = nv < _SMALL_ANGLE
    angle = 2.0 * np.arctan2(nv, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0 / np.maximum(w, 0.5) * (1.0 - nv**2 / (3.0 * np.maximum(w, 0.5) ** 2)), angle / np.where(small, 1.0, nv))
    return k * v


def quat_boxplus(q, delta):
    """Right-local retraction q * exp(delta)."""
    return quat_normalize(quat_multiply(q, quat_exp(delta)))


def quat_boxminus(a, b):
    """Tangent difference so that b [+] (a [-] b) == a."""
    return quat_log(quat_multiply(quat_inverse(b), a))


def rodrigues_angle(q):
    """Total rotation angle of q, in [0, pi]."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def average_quaternion(qs):
    """Chordal-mean quaternion, the maximizer of sum_i (q_i^T q)^2.

    Invariant to per-element sign flips. Raises on an empty input.
    """
    qs = np.asarray(qs, dtype=float)
    if qs.ndim != 2 or qs.shape[0] == 0 or qs.shape[1] != 4:
        raise ValueError("need a non-empty (n, 4) array of quaternions")
    M = qs.T @ qs
    _, vecs = np.linalg.eigh(M)
    return quat_canonical(vecs[:, -1])


def skew(v):
    """Cross-product matrix, batched: skew(v) @ u == cross(v, u)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def so3_right_jacobian(phi):
    """Right Jacobian J_r of SO(3): exp(phi + d) ~ exp(phi) exp(J_r d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    S = skew(phi)
    S2 = S @ S
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / safe**3)
    eye = np.broadcast_to(np.eye(3), S.shape)
    return eye - a[..., None, None] * S + b[..., None, None] * S2


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    S = skew(phi)
    S2 = S @ S
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0,
        (1.0 / safe**2) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    eye = np.broadcast_to(np.eye(3), S.shape)
    return eye + 0.5 * S + c[..., None, None] * S2


@dataclass
class Transform:
    """Rigid transform T_AB = (q_AB, t): p_A = R(q_AB) p_B + t."""

    q: np.ndarray = field(default_factory=quat_identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        self.t = np.asarray(self.t, dtype=float)

    def compose(self, other: "Transform") -> "Transform":
        return Transform(quat_multiply(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Transform":
        qi = quat_inverse(self.q)
        return Transform(qi, -quat_rotate(qi, self.t))

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.t
        return T


def transform_point(T: Transform, p):
    """Apply T to point(s): R p + t."""
    return quat_rotate(T.q, p) + T.t


def transform_boxminus(a: Transform, b: Transform):
    """6-vector [t_a - t_b, log(q_b^-1 q_a)]."""
    return np.concatenate([a.t - b.t, quat_boxminus(a.q, b.q)])


def transform_boxplus(T: Transform, delta):
    delta = np.asarray(delta, dtype=float)
    return Transform(quat_boxplus(T.q, delta[3:]), T.t + delta[:3])


def boxminus(a, b):
    """Generic tangent difference for quaternions, transforms and vectors."""
    if isinstance(a, Transform):
        return transform_boxminus(a, b)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] == 4 and b.shape[-1] == 4:
        return quat_boxminus(a, b)
    return a - b


def boxplus(a, delta):
    """Generic retraction matching :func:`boxminus`."""
    if isinstance(a, Transform):
        return transform_boxplus(a, delta)
    a = np.asarray(a, dtype=float)
    if a.shape[-1] == 4:
        return quat_boxplus(a, delta)
    return a + np.asarray(delta, dtype=float)
