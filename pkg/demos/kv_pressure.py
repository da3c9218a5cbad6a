"""Closed-loop recovery from KV-cache pressure.

In the ``fig5`` scenario the arrival rate jumps from 4 to 7 req/s at
t = 900 s.  The replica runs out of KV memory long before its batch limit and
a queue builds.  The detector flags the episode, the recommender raises
``gpu_memory`` toward the 95% safety cap, and admissions recover.
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from importlib import resources

from servescale.detector import VaeConfig
from servescale.orchestrator import fit_loop_detector, pending_slope, run_loop, sustained_admitted_rate
from servescale.simulator import load_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sc = load_scenario(resources.files("servescale") / "data" / "fig5.json")
    sc = replace(sc, workload=replace(sc.workload, rng_seed=args.seed))
    det = fit_loop_detector(sc, [3.0, 3.5, 4.0], config=VaeConfig(epochs=60, log_counts=True, seed=args.seed))
    print(f"detector threshold {det.threshold:.2f}")
    lr = run_loop(sc, det)
    onset = sc.workload.segments()[1][0]
    print(f"first anomaly at t={lr.first_detection_after(onset):.0f} s (load change at {onset:.0f} s)")
    for a in lr.audit.actions:
        print(f"t={a.timestamp:.0f}: {a.rationale}")
        print(f"  gpu_memory {a.old.gpu_memory / 1e9:.1f} GB -> {a.new.gpu_memory / 1e9:.1f} GB, "
              f"replicas {a.old.total_replicas} -> {a.new.total_replicas}")
    if lr.audit.actions:
        ta = lr.audit.actions[0].timestamp
        pre = sustained_admitted_rate(lr.result, onset, ta)
        post = sustained_admitted_rate(lr.result, ta + 60, ta + 360)
        print(f"admitted rate while queued: {pre:.2f} -> {post:.2f} req/s ({post / pre:.2f}x)")
        print(f"pending trend after restart: {pending_slope(lr.result, ta + 60, sc.workload.duration):+.3f} req/s")


if __name__ == "__main__":
    main()
