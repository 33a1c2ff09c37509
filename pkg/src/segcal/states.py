"""Estimation-state and measurement containers.

Keyframes, landmarks, IMU samples and pixel observations are kept in flat
numpy arrays (struct-of-arrays) so that residuals and Jacobians can be
evaluated for whole problems at once. Single-element dataclass views are
provided where a scalar API is more natural.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo


@dataclass
class KeyframeState:
    """Pose, velocity and IMU biases at one keyframe."""

    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray
    t: float


@dataclass
class Landmark:
    id: int
    p: np.ndarray


@dataclass
class ImuSample:
    t: float
    w: np.ndarray
    a: np.ndarray


@dataclass
class Observation:
    kf: int
    lm: int
    uv: np.ndarray


@dataclass
class KeyframeArray:
    """Keyframe states over time; timestamps must be strictly increasing."""

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.b_a = np.asarray(self.b_a, dtype=float)
        self.b_g = np.asarray(self.b_g, dtype=float)
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0.0):
            raise ValueError("keyframe timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def state(self, i: int) -> KeyframeState:
        return KeyframeState(
            self.q[i].copy(), self.p[i].copy(), self.v[i].copy(),
            self.b_a[i].copy(), self.b_g[i].copy(), float(self.t[i]),
        )

    def slice(self, lo: int, hi: int) -> "KeyframeArray":
        return KeyframeArray(
            self.t[lo:hi].copy(), self.q[lo:hi].copy(), self.p[lo:hi].copy(),
            self.v[lo:hi].copy(), self.b_a[lo:hi].copy(), self.b_g[lo:hi].copy(),
        )

    def copy(self) -> "KeyframeArray":
        return self.slice(0, len(self))

    @staticmethod
    def concatenate(parts: list["KeyframeArray"]) -> "KeyframeArray":
        return KeyframeArray(
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.q for p in parts]),
            np.concatenate([p.p for p in parts]),
            np.concatenate([p.v for p in parts]),
            np.concatenate([p.b_a for p in parts]),
            np.concatenate([p.b_g for p in parts]),
        )


@dataclass
class ImuData:
    """Time-sorted raw IMU stream (or a slice of one)."""

    t: np.ndarray
    w: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0.0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def window(self, t0: float, t1: float, eps: float = 1e-9) -> "ImuData":
        m = (self.t >= t0 - eps) & (self.t <= t1 + eps)
        return ImuData(self.t[m].copy(), self.w[m].copy(), self.a[m].copy())

    @staticmethod
    def merge(parts: list["ImuData"]) -> "ImuData":
        """Concatenate time-sorted slices, dropping duplicated boundary samples."""
        t = np.concatenate([p.t for p in parts])
        w = np.concatenate([p.w for p in parts])
        a = np.concatenate([p.a for p in parts])
        order = np.argsort(t, kind="stable")
        t, w, a = t[order], w[order], a[order]
        keep = np.ones(len(t), dtype=bool)
        keep[1:] = np.diff(t) > 1e-9
        return ImuData(t[keep], w[keep], a[keep])


@dataclass
class ObservationArray:
    """Pixel observations; kf and lm columns hold integer ids."""

    kf: np.ndarray
    lm: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        self.kf = np.asarray(self.kf, dtype=np.int64)
        self.lm = np.asarray(self.lm, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=float)

    def __len__(self):
        return len(self.kf)

    def subset(self, mask) -> "ObservationArray":
        return ObservationArray(self.kf[mask].copy(), self.lm[mask].copy(), self.uv[mask].copy())

    @staticmethod
    def concatenate(parts: list["ObservationArray"]) -> "ObservationArray":
        return ObservationArray(
            np.concatenate([p.kf for p in parts]),
            np.concatenate([p.lm for p in parts]),
            np.concatenate([p.uv for p in parts]),
        )


@dataclass
class Segment:
    """A window of consecutive keyframes with everything needed to score it.

    Keyframe and landmark values are tracking-front-end estimates, not ground
    truth. ``first_kf`` is the index of the first keyframe in the originating
    stream; observation ``kf`` columns use stream indices as well. The IMU
    slice additionally includes the samples up to the first keyframe of the
    next stream segment (one trailing inter-keyframe interval) so that
    temporally adjacent segments can be merged without an inertial gap.
    """

    id: int
    first_kf: int
    keyframes: KeyframeArray
    lm_ids: np.ndarray
    lm_pos: np.ndarray
    obs: ObservationArray
    imu: ImuData

    def __post_init__(self):
        self.lm_ids = np.asarray(self.lm_ids, dtype=np.int64)
        self.lm_pos = np.asarray(self.lm_pos, dtype=float)

    @property
    def n_kf(self) -> int:
        return len(self.keyframes)

    @property
    def t_start(self) -> float:
        return float(self.keyframes.t[0])

    @property
    def t_end(self) -> float:
        return float(self.keyframes.t[-1])

    @property
    def kf_range(self):
        """Stream indices [first, last] of the owned keyframes."""
        return self.first_kf, self.first_kf + self.n_kf - 1

    def freeze(self):
        """Mark all payload arrays read-only (stored segments are immutable)."""
        for arr in (
            self.keyframes.t, self.keyframes.q, self.keyframes.p, self.keyframes.v,
            self.keyframes.b_a, self.keyframes.b_g, self.lm_ids, self.lm_pos,
            self.obs.kf, self.obs.lm, self.obs.uv, self.imu.t, self.imu.w, self.imu.a,
        ):
            arr.setflags(write=False)
        return self


def merge_segments(parts: list[Segment], new_id: int) -> Segment:
    """Join temporally contiguous segments into one larger segment."""
    parts = sorted(parts, key=lambda s: s.first_kf)
    for a, b in zip(parts[:-1], parts[1:]):
        if b.first_kf != a.first_kf + a.n_kf:
            raise ValueError("segments are not contiguous")
    lm_ids = {}
    for s in parts:
        for i, lid in enumerate(s.lm_ids):
            lm_ids.setdefault(int(lid), s.lm_pos[i])
    ids = np.array(sorted(lm_ids), dtype=np.int64)
    pos = np.array([lm_ids[i] for i in ids]) if len(ids) else np.zeros((0, 3))
    return Segment(
        id=new_id,
        first_kf=parts[0].first_kf,
        keyframes=KeyframeArray.concatenate([s.keyframes for s in parts]),
        lm_ids=ids,
        lm_pos=pos,
        obs=ObservationArray.concatenate([s.obs for s in parts]),
        imu=ImuData.merge([s.imu for s in parts]),
    )
