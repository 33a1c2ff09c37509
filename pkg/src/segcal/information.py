"""Segment information scoring.

A candidate motion segment is scored independently of everything else: its
own factors define an information matrix J^T J (J the whitened Jacobian
with the calibration columns rightmost), whose inverse's trailing block is
the marginal covariance of the calibration parameters with keyframes and
landmarks treated as nuisance variables. The marginal is obtained from a QR
decomposition of J: with R upper triangular, the trailing block satisfies
Sigma_theta = (R22^T R22)^-1 and is computed by back-substitution on R22
alone, never by inverting the full dense system. Rank deficiency of the
trailing block is detected on the diagonal of R22 and scored as
uninformative (+inf entropy) rather than raised.

Entropies are computed per parameter group on the normalized marginal; a
lower entropy means a more informative segment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import sensor_models as sm
from .problem import (SCORING_GAUGE_SQRT_WEIGHT, Problem, build_problem,
                      dense_whitened_system)
from .states import Segment

LOG_2PIE = math.log(2.0 * math.pi * math.e)

# Diagonal entries of R22 below this fraction of the largest one flag a
# rank-deficient calibration block.
RANK_RTOL = 1e-10


class GroupingError(ValueError):
    pass


@dataclass
class ParameterGrouping:
    """Ordered, disjoint index groups over the calibration tangent vector.

    Groups are declared by calibration block names (see
    ``sensor_models.THETA_BLOCKS``); their union may be a strict subset.
    """

    groups: dict[str, list[int]]

    @classmethod
    def from_block_names(cls, named_groups: dict[str, list[str]]) -> "ParameterGrouping":
        idx = sm.THETA_INDEX
        out, seen = {}, set()
        for gname, blocks in named_groups.items():
            cols = []
            for b in blocks:
                if b not in idx:
                    raise GroupingError("unknown calibration block %r" % b)
                cols.extend(idx[b])
            if set(cols) & seen:
                raise GroupingError("parameter groups must be disjoint")
            seen.update(cols)
            out[gname] = cols
        if not out:
            raise GroupingError("grouping needs at least one group")
        return cls(out)

    @property
    def names(self):
        return list(self.groups)

    def __len__(self):
        return len(self.groups)


def default_grouping() -> ParameterGrouping:
    """Per-sensor groups: IMU intrinsics, camera intrinsics, extrinsics."""
    return ParameterGrouping.from_block_names(
        {
            "imu": ["s_g", "m_g", "s_a", "m_a", "q_ai"],
            "camera": ["f", "c", "w"],
            "extrinsics": ["q_ci", "p_ci"],
        }
    )


def single_grouping() -> ParameterGrouping:
    """One group holding the entire calibration vector."""
    return ParameterGrouping.from_block_names(
        {"all": [name for name, _ in sm.THETA_BLOCKS]}
    )


def marginal_covariance_from_whitened(J_w, theta_dim: int = sm.THETA_DIM):
    """Trailing-block marginal covariance from a whitened Jacobian.

    Returns None if the calibration block is rank deficient.
    """
    if J_w.shape[0] < J_w.shape[1]:
        return None
    Rfac = np.linalg.qr(J_w, mode="r")
    R22 = Rfac[-theta_dim:, -theta_dim:]
    d = np.abs(np.diag(R22))
    if d.min() <= d.max() * RANK_RTOL or d.max() == 0.0:
        return None
    X = sla.solve_triangular(R22, np.eye(theta_dim), check_finite=False)
    cov = X @ X.T
    return 0.5 * (cov + cov.T)


def marginal_covariance(problem: Problem):
    """Marginal covariance of the calibration parameters of one problem.

    The problem must contain at least one inertial and one reprojection
    factor. Returns None when the calibration block is rank deficient
    (degenerate motion), which callers score as uninformative.
    """
    if len(problem.int_start) == 0:
        raise ValueError("segment problem has no inertial factor")
    if problem.n_obs == 0:
        raise ValueError("segment problem has no reprojection factor")
    J_w, _ = dense_whitened_system(problem)
    return marginal_covariance_from_whitened(J_w)


def normalize_covariance(cov, sigma_ref):
    """Rescale a marginal covariance by per-parameter reference deviations."""
    sigma_ref = np.asarray(sigma_ref, dtype=float)
    if np.any(sigma_ref <= 0.0) or not np.all(np.isfinite(sigma_ref)):
        raise ValueError("reference deviations must be positive and finite")
    if cov.shape != (len(sigma_ref), len(sigma_ref)):
        raise ValueError("covariance and reference dimensions differ")
    inv = 1.0 / sigma_ref
    return cov * np.outer(inv, inv)


def entropy(cov) -> float:
    """Differential entropy 0.5 ln((2 pi e)^k det cov) in nats.

    The log determinant comes from a triangular factorization; a non-SPD
    input returns +inf (the uninformative sentinel).
    """
    cov = np.asarray(cov, dtype=float)
    k = cov.shape[0]
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return math.inf
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return 0.5 * (k * LOG_2PIE + logdet)


@dataclass
class SegmentScore:
    """Per-group differential entropies of one segment (nats)."""

    segment_id: int
    t_start: float
    t_end: float
    kf_range: tuple[int, int]
    entropies: dict[str, float]
    singular: bool = False

    def finite_groups(self):
        return [g for g, h in self.entropies.items() if math.isfinite(h)]


@dataclass
class SegmentScorer:
    """Scores segments against a fixed calibration/noise/grouping context.

    Scoring a segment depends only on the segment content and this frozen
    context, never on other segments or any database state; concurrent use
    on distinct segments is safe.
    """

    calib: sm.CalibrationParams
    noise: sm.NoiseSpec
    grouping: ParameterGrouping = field(default_factory=default_grouping)
    sigma_ref: np.ndarray | None = None
    gauge_weight: float = SCORING_GAUGE_SQRT_WEIGHT
    min_track: int = 2

    def build_problem(self, segment: Segment) -> Problem:
        obs_local = segment.obs.subset(np.ones(len(segment.obs), dtype=bool))
        obs_local.kf = obs_local.kf - segment.first_kf
        imu_own = segment.imu.window(segment.keyframes.t[0], segment.keyframes.t[-1])
        return build_problem(
            segment.keyframes, imu_own, obs_local, segment.lm_ids, segment.lm_pos,
            self.calib, self.noise, gauge_kfs=(0,), gauge_weight=self.gauge_weight,
            min_track=self.min_track,
        )

    def score(self, segment: Segment) -> SegmentScore:
        problem = self.build_problem(segment)
        cov = marginal_covariance(problem)
        return self.score_from_covariance(segment, cov)

    def score_from_covariance(self, segment: Segment, cov) -> SegmentScore:
        if cov is None:
            ent = {g: math.inf for g in self.grouping.names}
            singular = True
        else:
            ref = self.sigma_ref if self.sigma_ref is not None else np.ones(sm.THETA_DIM)
            cov_n = normalize_covariance(cov, ref)
            ent = {}
            for g, cols in self.grouping.groups.items():
                ent[g] = entropy(cov_n[np.ix_(cols, cols)])
            singular = not all(math.isfinite(h) for h in ent.values())
        return SegmentScore(
            segment_id=segment.id,
            t_start=segment.t_start,
            t_end=segment.t_end,
            kf_range=segment.kf_range,
            entropies=ent,
            singular=singular,
        )


def score_segment(segment: Segment, grouping: ParameterGrouping, sigma_ref,
                  calib: sm.CalibrationParams, noise: sm.NoiseSpec) -> SegmentScore:
    """One-shot segment scoring; see :class:`SegmentScorer`."""
    return SegmentScorer(calib, noise, grouping, np.asarray(sigma_ref, dtype=float)).score(segment)


def reference_sigma(segments, calib: sm.CalibrationParams, noise: sm.NoiseSpec,
                    gauge_weight: float = SCORING_GAUGE_SQRT_WEIGHT):
    """Per-parameter reference deviations from a set of reference segments.

    Root-mean of the marginal variances over all segments with a
    non-singular calibration marginal. The result is meant to be frozen in
    configuration for a given scenario family.
    """
    scorer = SegmentScorer(calib, noise, gauge_weight=gauge_weight)
    diags = []
    for seg in segments:
        cov = marginal_covariance(scorer.build_problem(seg))
        if cov is not None:
            diags.append(np.diag(cov))
    if not diags:
        raise ValueError("no reference segment produced a finite marginal")
    return np.sqrt(np.mean(diags, axis=0))


def write_score_log(path, scores: list[SegmentScore], group_names):
    """CSV log of per-segment entropies (source data for histograms)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "t_start", "t_end", "kf_first", "kf_last"]
                   + ["H_%s" % g for g in group_names])
        for s in scores:
            w.writerow(
                [s.segment_id, "%.9g" % s.t_start, "%.9g" % s.t_end,
                 s.kf_range[0], s.kf_range[1]]
                + ["%.12g" % s.entropies[g] for g in group_names]
            )
