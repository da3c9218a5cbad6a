"""Recommend a two-GPU-type deployment from load-probe traces.

Each GPU type is probed alone at 1.5x its nominal capacity to get a saturated
trace for the capacity estimate.  The nominal two-replica run supplies traces
with varying concurrency for the memory fit.  The recommended configuration
is then replayed at 90% of the target demand.
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from importlib import resources

from servescale.core import MetricWindow
from servescale.recommender import recommend_detailed
from servescale.simulator import load_scenario
from servescale.stats import ols_fit
from servescale.taskcluster import corpus_model, read_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--demand", type=float, default=9.0, help="target req/s")
    args = ap.parse_args()
    data = resources.files("servescale") / "data"
    sc = load_scenario(data / "two_gpu.json")
    probes = {}
    for g, dev in sc.device_map().items():
        solo = replace(sc.config, replicas={g: 1}, weights={g: 1.0})
        res = replace(sc, config=solo).with_rate(1.5 * dev.tokens_per_second_capacity / 150).run()
        probes[g] = MetricWindow(tuple(s for s in res.samples if s.timestamp > 300))
    base = sc.run()
    memory = {base.replica_types[r]: MetricWindow(tuple(s)) for r, s in base.replica_samples.items()}
    history = corpus_model(read_corpus(data / "corpus.jsonl"))
    rec = recommend_detailed(probes, history, sc.device_map(), sc.profile, args.demand, memory_windows=memory,
                             seq_length=sc.workload.mean_input_length(),
                             reserve_max_tokens=not sc.optimistic_admission)
    print(rec.describe())
    replay = replace(sc, config=rec.config).with_rate(0.9 * args.demand).run()
    slope = ols_fit(replay.column("ts"), replay.column("n_p")).slope
    print(f"replay at {0.9 * args.demand:.1f} req/s: completed {len(replay.completed) / sc.workload.duration:.2f} "
          f"req/s, max pending {replay.column('n_p').max():.0f}, pending trend {slope:+.4f}")


if __name__ == "__main__":
    main()
