"""Sparsified-problem construction from selected motion segments.

Pipeline: temporally adjacent segments are merged so no inertial gap hides
inside a merged segment; merged segments are partitioned by landmark
co-visibility with a union-find (two partitions never co-observe more than
the threshold number of distinct landmarks); bias random-walk bridges are
inserted across removed-keyframe gaps inside a partition; and exactly one
keyframe per partition (its earliest) has position and yaw gauge-fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import sensor_models as sm
from .problem import GAUGE_SQRT_WEIGHT, Problem, build_problem
from .states import ImuData, KeyframeArray, ObservationArray, Segment, merge_segments


class UnionFind:
    """Union-find with path compression over dense integer ids."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def components(self) -> list[list[int]]:
        comp: dict[int, list[int]] = {}
        for i in range(len(self.parent)):
            comp.setdefault(self.find(i), []).append(i)
        return sorted(comp.values())


@dataclass
class Partition:
    """Disjoint set of merged segments solved as one connected block."""

    segment_ids: list[int]
    kf_ranges: list[tuple[int, int]]
    gauge_kf: int | None = None          # stream index of the gauge keyframe


@dataclass
class PartitionReport:
    partitions: list[Partition]
    shared_counts: dict[tuple[int, int], int]
    bridges: list[dict]
    merged_from: dict[int, list[int]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "partitions": [
                    {"segments": p.segment_ids, "kf_ranges": p.kf_ranges, "gauge_kf": p.gauge_kf}
                    for p in self.partitions
                ],
                "shared_landmarks": [
                    {"a": a, "b": b, "count": c} for (a, b), c in sorted(self.shared_counts.items())
                ],
                "bridges": self.bridges,
                "merged_from": {str(k): v for k, v in self.merged_from.items()},
            },
            indent=2,
        )


def merge_temporal(segments: list[Segment]) -> tuple[list[Segment], dict[int, list[int]]]:
    """Join segments whose keyframe ranges are contiguous in the stream.

    Returns the merged list (time-sorted) and a map merged-id -> member ids.
    Raises on overlapping keyframe ranges.
    """
    segs = sorted(segments, key=lambda s: s.first_kf)
    for a, b in zip(segs[:-1], segs[1:]):
        if b.first_kf <= a.kf_range[1]:
            raise ValueError(
                "segments %d and %d have overlapping keyframe ranges" % (a.id, b.id)
            )
    merged, members = [], {}
    run = []
    for s in segs:
        if run and s.first_kf == run[-1].kf_range[1] + 1:
            run.append(s)
        else:
            if run:
                merged.append(run)
            run = [s]
    if run:
        merged.append(run)
    out = []
    for group in merged:
        if len(group) == 1:
            out.append(group[0])
            members[group[0].id] = [group[0].id]
        else:
            m = merge_segments(group, new_id=group[0].id)
            out.append(m)
            members[m.id] = [s.id for s in group]
    return out, members


def shared_landmark_count(a: Segment, b: Segment) -> int:
    """Distinct landmarks observed by both segments (multiplicity ignored)."""
    return len(np.intersect1d(np.unique(a.obs.lm), np.unique(b.obs.lm)))


def partition_by_covisibility(segments: list[Segment], threshold: int):
    """Connected components of the graph with edges where co-visibility
    exceeds the threshold.

    Returns (partitions as lists of positions into ``segments``, pairwise
    shared counts). The result is independent of the segment order.
    """
    if threshold < 0:
        raise ValueError("co-visibility threshold must be non-negative")
    order = sorted(range(len(segments)), key=lambda i: segments[i].first_kf)
    uf = UnionFind(len(segments))
    shared: dict[tuple[int, int], int] = {}
    lm_sets = [set(np.unique(s.obs.lm).tolist()) for s in segments]
    for ii, i in enumerate(order):
        for j in order[:ii]:
            c = len(lm_sets[i] & lm_sets[j])
            a, b = sorted((segments[i].id, segments[j].id))
            shared[(a, b)] = c
            if c > threshold:
                uf.union(i, j)
    return uf.components(), shared


def find_bridge_gaps(partition_segments: list[Segment]) -> list[dict]:
    """Gaps between time-consecutive merged segments of one partition."""
    segs = sorted(partition_segments, key=lambda s: s.first_kf)
    gaps = []
    for a, b in zip(segs[:-1], segs[1:]):
        if b.first_kf > a.kf_range[1] + 1:
            gaps.append(
                {
                    "from_kf": a.kf_range[1],
                    "to_kf": b.first_kf,
                    "dt": float(b.keyframes.t[0] - a.keyframes.t[-1]),
                }
            )
    return gaps


def build_sparsified_problem(
    segments: list[Segment],
    calib: sm.CalibrationParams,
    noise: sm.NoiseSpec,
    covis_threshold: int = 15,
    gauge_weight: float = GAUGE_SQRT_WEIGHT,
    min_track: int = 2,
) -> tuple[Problem, PartitionReport]:
    """Assemble the calibration problem over the selected segments."""
    if not segments:
        raise ValueError("no segments to build a problem from")
    merged, members = merge_temporal(segments)
    comp_idx, shared = partition_by_covisibility(merged, covis_threshold)

    partitions = []
    bridges_all = []
    for comp in comp_idx:
        segs = sorted((merged[i] for i in comp), key=lambda s: s.first_kf)
        gaps = find_bridge_gaps(segs)
        bridges_all.extend(gaps)
        partitions.append(
            Partition(
                segment_ids=[s.id for s in segs],
                kf_ranges=[s.kf_range for s in segs],
                gauge_kf=segs[0].first_kf,
            )
        )

    ordered = sorted(merged, key=lambda s: s.first_kf)
    keyframes = KeyframeArray.concatenate([s.keyframes for s in ordered])
    imu = ImuData.merge([s.imu for s in ordered])
    obs = ObservationArray.concatenate([s.obs for s in ordered])

    # landmark estimates: first segment providing each id wins
    lm_map: dict[int, np.ndarray] = {}
    for s in ordered:
        for k, lid in enumerate(s.lm_ids):
            lm_map.setdefault(int(lid), s.lm_pos[k])
    lm_ids = np.array(sorted(lm_map), dtype=np.int64)
    lm_pos = np.array([lm_map[i] for i in lm_ids]) if len(lm_ids) else np.zeros((0, 3))

    # map stream keyframe ids to local indices
    stream_ids = np.concatenate(
        [np.arange(s.first_kf, s.first_kf + s.n_kf) for s in ordered]
    )
    local_of = {int(g): i for i, g in enumerate(stream_ids)}
    obs_local = ObservationArray(
        np.array([local_of[int(k)] for k in obs.kf], dtype=np.int64), obs.lm, obs.uv.copy()
    )

    # intervals without inertial coverage: boundaries between merged segments
    chain_breaks = set()
    bridge_local = {}
    boundary_after = np.cumsum([s.n_kf for s in ordered])[:-1] - 1
    chain_breaks.update(int(i) for i in boundary_after)
    bridged_from = {g["from_kf"] for g in bridges_all}
    for i in boundary_after:
        if int(stream_ids[i]) in bridged_from:
            bridge_local[int(i)] = True
    gauge_local = [local_of[p.gauge_kf] for p in partitions]

    problem = build_problem(
        keyframes, imu, obs_local, lm_ids, lm_pos, calib, noise,
        chain_breaks=chain_breaks, bridges=sorted(bridge_local),
        gauge_kfs=gauge_local, gauge_weight=gauge_weight, min_track=min_track,
        kf_stream_ids=stream_ids,
    )
    report = PartitionReport(
        partitions=partitions, shared_counts=shared, bridges=bridges_all,
        merged_from=members,
    )
    return problem, report
