"""Calibration pipeline: stream segments, score, select, solve, report.

The selection loop mirrors the intended deployment: fixed-size segments
arrive in stream order, each is scored independently, the per-group
database keeps the best ones, and a sparsified calibration problem over
the database content is solved. In ``least-informative`` mode the selection
is inverted (segments with the largest finite entropies win); segments with
singular information (+inf entropy) are never selected in either mode.

Solve schedules:
  on_update     re-solve after every database change once ready (default;
                produces a convergence trace against a reference solution)
  at_end        consume the whole stream, solve once
  first_ready   stop at the first database-full event and solve (the
                cheapest one-shot variant)

All reported runtimes are solver wall-clock only (monotonic clock),
excluding data generation and scoring.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import sensor_models as sm
from .config import Config, config_canonical_dict, config_hash
from .information import (ParameterGrouping, SegmentScorer, default_grouping,
                          single_grouping, write_score_log)
from .partitioner import build_sparsified_problem
from .problem import build_problem
from .segment_db import DatabasePolicy, SegmentDatabase, SegmentRecord
from .simulator import Dataset, generate, segment_stream
from .solver import SolveResult, SolverOptions, solve
from .states import ObservationArray

THETA_BLOCK_NAMES = [name for name, _ in sm.THETA_BLOCKS]


def solver_options(cfg: Config) -> SolverOptions:
    s = cfg.solver
    return SolverOptions(
        lambda_init=s.lambda_init, lambda_factor=s.lambda_factor,
        max_iterations=s.max_iterations, cost_tol=s.cost_tol, grad_tol=s.grad_tol,
    )


def grouping_from_config(cfg: Config) -> ParameterGrouping:
    if cfg.pipeline.single_group:
        return single_grouping()
    if cfg.pipeline.groups:
        return ParameterGrouping.from_block_names(cfg.pipeline.groups)
    return default_grouping()


def calibration_deviation(a: sm.CalibrationParams, b: sm.CalibrationParams) -> dict:
    """Per-block deviation a (-) b; rotation blocks as total angle (rad)."""
    d = a.boxminus(b)
    idx = sm.THETA_INDEX
    out = {}
    for name, _dim in sm.THETA_BLOCKS:
        v = d[idx[name]]
        out[name] = float(np.linalg.norm(v))
    return out


def problem_from_dataset(dataset: Dataset, calib0: sm.CalibrationParams,
                         gauge_weight: float, min_track: int = 2):
    """Full-batch problem over every keyframe of a dataset."""
    obs = ObservationArray(dataset.obs.kf.copy(), dataset.obs.lm.copy(), dataset.obs.uv.copy())
    return build_problem(
        dataset.est_kf, dataset.imu, obs, dataset.lm_ids, dataset.est_lm,
        calib0, dataset.noise, gauge_kfs=(0,), gauge_weight=gauge_weight,
        min_track=min_track, kf_stream_ids=np.arange(dataset.n_kf),
    )


@dataclass
class RunRecord:
    """Outcome of one calibration run (batch or sparsified)."""

    mode: str
    calib: sm.CalibrationParams
    solve_result: SolveResult
    solve_time_s: float
    n_segments_used: int = 0
    segments_used: list = field(default_factory=list)
    total_solve_time_s: float = 0.0
    n_keyframes: int = 0
    partition_report_json: str | None = None
    db_snapshot: dict | None = None
    scores: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    n_updates: int = 0


def run_batch(cfg: Config, dataset: Dataset | None = None) -> RunRecord:
    """Single full-graph solve; the reference for all deviation metrics."""
    dataset = dataset if dataset is not None else generate(cfg.scenario)
    problem = problem_from_dataset(
        dataset, cfg.scenario.initial_calibration, cfg.solver.gauge_sqrt_weight()
    )
    t0 = time.perf_counter()
    res = solve(problem, solver_options(cfg))
    dt = time.perf_counter() - t0
    return RunRecord(
        mode="batch", calib=problem.calib.copy(), solve_result=res, solve_time_s=dt,
        n_segments_used=0, total_solve_time_s=dt, n_keyframes=problem.n_kf,
    )


def run_pipeline(cfg: Config, dataset: Dataset | None = None,
                 batch_reference: sm.CalibrationParams | None = None,
                 scores=None) -> RunRecord:
    """Segment-based calibration per the configured selection mode.

    ``scores`` optionally supplies precomputed SegmentScore objects (matched
    to the stream order) so repeated runs on the same dataset don't pay for
    scoring twice. A trace row is appended on every database change; solved
    deviations are filled when a batch reference is given.
    """
    dataset = dataset if dataset is not None else generate(cfg.scenario)
    pcfg = cfg.pipeline
    grouping = grouping_from_config(cfg)
    scorer = SegmentScorer(
        calib=cfg.scenario.initial_calibration, noise=dataset.noise,
        grouping=grouping, sigma_ref=pcfg.sigma_ref_array(),
    )
    segments = segment_stream(dataset, pcfg.segment_len_kf)
    db = SegmentDatabase(grouping.names, pcfg.db_capacity_per_group)
    policy = DatabasePolicy(pcfg.effective_quota())
    invert = pcfg.mode == "least-informative"

    def build_and_solve():
        selected = db.drain()
        problem, report = build_sparsified_problem(
            selected, cfg.scenario.initial_calibration, dataset.noise,
            covis_threshold=pcfg.covis_threshold,
            gauge_weight=cfg.solver.gauge_sqrt_weight(),
        )
        t0 = time.perf_counter()
        res = solve(problem, solver_options(cfg))
        dt = time.perf_counter() - t0
        return problem, report, res, dt, [s.id for s in selected]

    all_scores = []
    trace = []
    last = None
    total_solve = 0.0
    for k, seg in enumerate(segments):
        score = scores[k] if scores is not None else scorer.score(seg)
        assert score.segment_id == seg.id
        all_scores.append(score)
        offered = score
        if invert:
            ent = {g: (-h if math.isfinite(h) else math.inf)
                   for g, h in score.entropies.items()}
            offered = type(score)(score.segment_id, score.t_start, score.t_end,
                                  score.kf_range, ent, score.singular)
        accepted = db.update(SegmentRecord(seg, offered))
        if not accepted:
            continue
        row = {
            "update": db.n_updates, "segment_id": seg.id,
            "accepted_groups": ",".join(accepted),
            "n_segments": db.n_segments,
        }
        ready = db.is_ready(policy)
        if ready and pcfg.solve_schedule in ("on_update", "first_ready"):
            problem, report, res, dt, used = build_and_solve()
            total_solve += dt
            last = (problem, report, res, dt, used)
            if batch_reference is not None:
                row.update({"dev_%s" % k2: v for k2, v in
                            calibration_deviation(problem.calib, batch_reference).items()})
        trace.append(row)
        if ready and pcfg.solve_schedule == "first_ready" and last is not None:
            break

    if last is None or pcfg.solve_schedule == "at_end":
        if not db.is_ready(policy) and db.n_segments == 0:
            raise RuntimeError("database empty after the stream; nothing to calibrate")
        problem, report, res, dt, used = build_and_solve()
        total_solve += dt
        last = (problem, report, res, dt, used)

    problem, report, res, dt, used = last
    return RunRecord(
        mode=pcfg.mode, calib=problem.calib.copy(), solve_result=res, solve_time_s=dt,
        n_segments_used=len(used), segments_used=used, total_solve_time_s=total_solve,
        n_keyframes=problem.n_kf, partition_report_json=report.to_json(),
        db_snapshot=db.snapshot_dict(), scores=all_scores, trace=trace,
        n_updates=db.n_updates,
    )


# ---------------------------------------------------------------- reporting


def _fmt(x):
    return "%.10g" % x


def write_trace_csv(path, trace_rows):
    cols = ["update", "segment_id", "accepted_groups", "n_segments"]
    dev_cols = ["dev_%s" % n for n in THETA_BLOCK_NAMES]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + dev_cols)
        for row in trace_rows:
            w.writerow([row.get(c, "") for c in cols]
                       + [_fmt(row[c]) if c in row else "" for c in dev_cols])


def _block_values(calib: sm.CalibrationParams):
    return {
        "f": calib.camera.f, "c": calib.camera.c, "w": np.array([calib.camera.w]),
        "s_g": calib.gyro.s_g, "m_g": calib.gyro.m_g,
        "s_a": calib.accel.s_a, "m_a": calib.accel.m_a,
        "p_ci": calib.extrinsics.p_ci,
    }


def parameter_statistics(calibs: list[sm.CalibrationParams], reference_q=None):
    """Mean and std per calibration component over a set of runs.

    Vector blocks are componentwise; the two rotations are summarized by
    the total angle of the averaged quaternion and the spread of the
    per-run angles to that average.
    """
    rows = []
    if calibs:
        for name in ("f", "c", "w", "s_g", "m_g", "s_a", "m_a", "p_ci"):
            vals = np.stack([_block_values(c)[name] for c in calibs])
            for k in range(vals.shape[1]):
                rows.append({
                    "parameter": name if vals.shape[1] == 1 else "%s[%d]" % (name, k),
                    "mean": float(np.mean(vals[:, k])), "std": float(np.std(vals[:, k])),
                })
        for name, getter in (("q_ci", lambda c: c.extrinsics.q_ci),
                             ("q_ai", lambda c: c.accel.q_ai)):
            qs = np.stack([getter(c) for c in calibs])
            q_mean = geo.average_quaternion(qs)
            if reference_q and name in reference_q:
                angle = geo.rodrigues_angle(
                    geo.quat_multiply(geo.quat_inverse(reference_q[name]), q_mean))
            else:
                angle = geo.rodrigues_angle(q_mean)
            spreads = [geo.rodrigues_angle(geo.quat_multiply(geo.quat_inverse(q_mean), q))
                       for q in qs]
            rows.append({"parameter": "gamma(%s)_deg" % name,
                         "mean": float(np.rad2deg(angle)),
                         "std": float(np.rad2deg(np.std(spreads)))})
    return rows


def write_statistics_csv(path, stats_by_mode: dict):
    """Table with one row per parameter and mean/std columns per mode."""
    modes = list(stats_by_mode)
    params = []
    for m in modes:
        for row in stats_by_mode[m]:
            if row["parameter"] not in params:
                params.append(row["parameter"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter"] + ["%s_%s" % (m, s) for m in modes for s in ("mean", "std")])
        for p in params:
            row = [p]
            for m in modes:
                hit = next((r for r in stats_by_mode[m] if r["parameter"] == p), None)
                row += [_fmt(hit["mean"]), _fmt(hit["std"])] if hit else ["", ""]
            w.writerow(row)


def write_runtime_csv(path, runtimes_by_mode: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "n_runs", "segments_mean", "segments_std",
                    "solve_time_mean_s", "solve_time_std_s"])
        for mode, recs in runtimes_by_mode.items():
            if not recs:
                w.writerow([mode, 0, "", "", "", ""])
                continue
            segs = np.array([r.n_segments_used for r in recs], dtype=float)
            times = np.array([r.solve_time_s for r in recs])
            w.writerow([mode, len(recs), _fmt(segs.mean()), _fmt(segs.std()),
                        _fmt(times.mean()), _fmt(times.std())])


def write_report(out_dir, cfg: Config, records_by_mode: dict,
                 truth: sm.CalibrationParams | None = None):
    """All run artifacts under one directory, with a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    artifacts = []

    stats = {}
    for mode, recs in records_by_mode.items():
        if recs:
            stats[mode] = parameter_statistics([r.calib for r in recs])
    if stats:
        path = os.path.join(out_dir, "parameter_statistics.csv")
        write_statistics_csv(path, stats)
        artifacts.append("parameter_statistics.csv")

    path = os.path.join(out_dir, "runtime.csv")
    write_runtime_csv(path, records_by_mode)
    artifacts.append("runtime.csv")

    for mode, recs in records_by_mode.items():
        for i, rec in enumerate(recs):
            tag = "%s_%02d" % (mode.replace("-", "_"), i)
            if rec.scores:
                p = os.path.join(out_dir, "scores_%s.csv" % tag)
                write_score_log(p, rec.scores, list(rec.scores[0].entropies))
                artifacts.append(os.path.basename(p))
            if rec.trace:
                p = os.path.join(out_dir, "trace_%s.csv" % tag)
                write_trace_csv(p, rec.trace)
                artifacts.append(os.path.basename(p))
            if rec.partition_report_json:
                p = os.path.join(out_dir, "partitions_%s.json" % tag)
                with open(p, "w") as fh:
                    fh.write(rec.partition_report_json)
                artifacts.append(os.path.basename(p))
            if rec.db_snapshot is not None:
                p = os.path.join(out_dir, "db_%s.json" % tag)
                with open(p, "w") as fh:
                    json.dump(rec.db_snapshot, fh, indent=2)
                artifacts.append(os.path.basename(p))
            p = os.path.join(out_dir, "calibration_%s.json" % tag)
            with open(p, "w") as fh:
                fh.write(rec.calib.to_json())
            artifacts.append(os.path.basename(p))

    if truth is not None:
        p = os.path.join(out_dir, "truth_calibration.json")
        with open(p, "w") as fh:
            fh.write(truth.to_json())
        artifacts.append(os.path.basename(p))

    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.scenario.seed,
        "seeds": cfg.run.seeds,
        "artifacts": sorted(artifacts),
        "config": config_canonical_dict(cfg),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
