"""Command-line interface.

Verbs:
  simulate    generate a synthetic dataset and write it as NDJSON
  score       score the segment stream of a dataset, write the entropy log
  calibrate   run a calibration (informative / least-informative / batch)
  report      aggregate calibration runs into statistics tables

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import Config, ConfigError, load_config
from .information import SegmentScorer, reference_sigma, write_score_log
from .pipeline import (grouping_from_config, run_batch, run_pipeline,
                       write_report)
from .simulator import Dataset, generate, segment_stream
from .solver import SolverRankError

EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _load(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg.scenario.seed = args.seed
    if getattr(args, "mode", None) is not None and args.mode != "batch":
        cfg.pipeline.mode = args.mode
    if getattr(args, "solve_schedule", None) is not None:
        cfg.pipeline.solve_schedule = args.solve_schedule
    if getattr(args, "single_group", False):
        cfg.pipeline.single_group = True
    return cfg


def _dataset(cfg: Config, args) -> Dataset:
    if getattr(args, "dataset", None):
        return Dataset.load(args.dataset)
    return generate(cfg.scenario)


def cmd_simulate(args):
    cfg = _load(args)
    ds = generate(cfg.scenario)
    ds.save(args.output)
    print("wrote %s (%d keyframes, %d landmarks, %d observations)"
          % (args.output, ds.n_kf, len(ds.lm_ids), len(ds.obs)))
    return 0


def cmd_score(args):
    cfg = _load(args)
    ds = _dataset(cfg, args)
    grouping = grouping_from_config(cfg)
    scorer = SegmentScorer(cfg.scenario.initial_calibration, ds.noise, grouping,
                           cfg.pipeline.sigma_ref_array())
    segments = segment_stream(ds, cfg.pipeline.segment_len_kf)
    scores = [scorer.score(s) for s in segments]
    write_score_log(args.output, scores, grouping.names)
    print("scored %d segments -> %s" % (len(scores), args.output))
    if args.sigma_ref_out:
        ref = reference_sigma(segments, cfg.scenario.initial_calibration, ds.noise)
        with open(args.sigma_ref_out, "w") as fh:
            json.dump({"sigma_ref": ref.tolist()}, fh, indent=2)
        print("wrote reference deviations -> %s" % args.sigma_ref_out)
    return 0


def cmd_calibrate(args):
    cfg = _load(args)
    ds = _dataset(cfg, args)
    mode = args.mode or cfg.pipeline.mode
    records = {}
    if mode == "batch":
        rec = run_batch(cfg, ds)
        records["batch"] = [rec]
    else:
        batch_ref = None
        if args.trace_batch:
            batch_ref = run_batch(cfg, ds)
            records["batch"] = [batch_ref]
        rec = run_pipeline(cfg, ds, batch_reference=batch_ref.calib if batch_ref else None)
        records[mode] = [rec]
    out = args.output or os.path.join(cfg.run.out_dir, "run_seed%d" % cfg.scenario.seed)
    write_report(out, cfg, records, truth=ds.truth_calib)
    res = rec.solve_result
    print("mode=%s converged=%s (%s) iterations=%d cost %.6g -> %.6g"
          % (mode, res.converged, res.reason, res.iterations,
             res.cost_initial, res.cost_final))
    print("segments used: %d, solve time %.2f s, artifacts in %s"
          % (rec.n_segments_used, rec.solve_time_s, out))
    return 0


def cmd_report(args):
    cfg = _load(args)
    rows = []
    for run_dir in args.runs:
        man_path = os.path.join(run_dir, "manifest.json")
        with open(man_path) as fh:
            rows.append({"run": run_dir, "manifest": json.load(fh)})
    os.makedirs(args.output, exist_ok=True)
    with open(os.path.join(args.output, "index.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
    print("aggregated %d runs -> %s" % (len(rows), args.output))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="segcal", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    sp.add_argument("-c", "--config")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("score", help="score the segment stream of a dataset")
    sp.add_argument("-c", "--config")
    sp.add_argument("-d", "--dataset")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--sigma-ref-out")
    sp.set_defaults(fn=cmd_score)

    sp = sub.add_parser("calibrate", help="run a calibration")
    sp.add_argument("-c", "--config")
    sp.add_argument("-d", "--dataset")
    sp.add_argument("-o", "--output")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--mode", choices=["informative", "least-informative", "batch"])
    sp.add_argument("--solve-schedule", choices=["on_update", "at_end", "first_ready"])
    sp.add_argument("--single-group", action="store_true")
    sp.add_argument("--trace-batch", action="store_true",
                    help="also run the batch reference and trace deviations to it")
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("report", help="aggregate run directories")
    sp.add_argument("-c", "--config")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print("configuration error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except SolverRankError as e:
        print("solver failure: %s" % e, file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError, RuntimeError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
