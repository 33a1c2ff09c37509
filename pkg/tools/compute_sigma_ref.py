"""Recompute the frozen per-parameter reference deviations.

Scores 30 reference segments drawn from default mixed-profile scenarios
with the dense (SVD) covariance oracle and prints the root-mean marginal
deviation per calibration parameter. The output is pasted into
``segcal.config.DEFAULT_SIGMA_REF``; rerun when the default scenario
family or noise model changes.
"""

import numpy as np

from segcal.config import ScenarioConfig, default_initial_calibration
from segcal.information import SegmentScorer
from segcal.problem import dense_whitened_system
from segcal.sensor_models import THETA_BLOCKS
from segcal.simulator import generate, segment_stream


def dense_oracle_cov(problem):
    J, _ = dense_whitened_system(problem)
    _, s, vt = np.linalg.svd(J, full_matrices=False)
    if s[-1] <= s[0] * 1e-12:
        return None
    return ((vt.T * s**-2) @ vt)[-26:, -26:]


def main():
    diags = []
    seed = 0
    while len(diags) < 30:
        cfg = ScenarioConfig(duration_s=16.0, motion="mixed", seed=1000 + seed)
        seed += 1
        ds = generate(cfg)
        scorer = SegmentScorer(default_initial_calibration(), ds.noise)
        for seg in segment_stream(ds, 40):
            cov = dense_oracle_cov(scorer.build_problem(seg))
            if cov is not None:
                diags.append(np.diag(cov))
            if len(diags) >= 30:
                break
    ref = np.sqrt(np.mean(diags, axis=0))
    print("DEFAULT_SIGMA_REF = [")
    off = 0
    for name, dim in THETA_BLOCKS:
        vals = ", ".join("%.6g" % v for v in ref[off:off + dim])
        print("    %s,%s# %s" % (vals, " " * max(1, 34 - len(vals)), name))
        off += dim
    print("]")


if __name__ == "__main__":
    main()
