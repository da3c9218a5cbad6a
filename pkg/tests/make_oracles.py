"""Regenerate ``oracle_values.json`` from the reference implementations.

Run from the repository root: ``python tests/make_oracles.py``.  Nothing
here imports the package, so the frozen values stay independent of it.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from scipy import stats

from oracles import (best_partition, exhaustive_placement, naive_point_adjusted, random_placement_instances)

TRIANGLES = [
    [0, 1, 1, 0, 0, 0],
    [1, 0, 1, 0, 0, 0],
    [1, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 1],
    [0, 0, 0, 1, 0, 1],
    [0, 0, 0, 1, 1, 0],
]


def pr_case():
    """Three anomalous runs; predictions touch two of them and add five false points."""
    truth = [0] * 60
    for a, b in ((5, 10), (20, 28), (40, 46)):
        truth[a:b] = [1] * (b - a)
    pred = [0] * 60
    pred[7] = pred[25] = 1
    for i in (0, 15, 30, 50, 55):
        pred[i] = 1
    return truth, pred


def main() -> None:
    q, labels, tried = best_partition(TRIANGLES)
    truth, pred = pr_case()
    p, r, f1 = naive_point_adjusted(truth, pred)
    instances = random_placement_instances(200, seed=2024)
    objectives = [exhaustive_placement(**inst) for inst in instances]
    values = {
        # params + max_num_seqs * seq_length * token_mem + others
        "kv_memory_7b": 14e9 + 8 * 2048 * 524288 + 1e9,
        "gpu_memory_example": {"fraction": 0.005 * 64 + 0.55, "gpu_memory": (0.005 * 64 + 0.55) * 80e9,
                               "parallel_size": 1},
        "parallel_size_for_1_7": math.ceil(1.7 / 0.95),
        "placement_example": {"replicas": {"A": 2, "B": 0},
                              "objective": exhaustive_placement([1, 2], [6, 4], [1, 1], [2, 2], 10)},
        "triangles": {"Q": q, "labels": labels, "partitions": tried},
        "pr_case": {"truth": truth, "pred": pred, "precision": p, "recall": r, "f1": f1},
        "placement_random": {"seed": 2024, "instances": instances, "objectives": objectives},
        "exp_quantile_1e-3": math.log(1000.0),
        "normal_q975": float(stats.norm.ppf(0.975)),
        "poisson_600s_at_6": {"mean": 3600.0, "sd": 60.0},
    }
    out = Path(__file__).with_name("oracle_values.json")
    out.write_text(json.dumps(values, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
