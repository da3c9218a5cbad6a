"""Throughput plateaus and latency explodes once arrivals exceed capacity.

Sweeps the ``fig4`` scenario over 1..12 req/s and prints one row per rate.
"""

from __future__ import annotations

import argparse
from importlib import resources

from servescale.cli import sweep_rates
from servescale.simulator import load_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()
    sc = load_scenario(resources.files("servescale") / "data" / "fig4.json")
    dev = sc.devices[0]
    bound = min(dev.tokens_per_second_capacity, sc.config.max_num_seqs * dev.per_sequence_token_rate)
    print(f"token-rate bound per GPU: {bound:.0f} tok/s")
    print(f"{'rate':>5} {'tok/s/GPU':>10} {'ms/token':>11} {'mean n_p':>9}")
    for row in sweep_rates(sc, [float(r) for r in range(1, 13)], args.seed, args.workers):
        print(f"{row['rate']:5.0f} {row['throughput']:10.1f} {row['latency'] * 1000:11.1f} {row['mean_n_p']:9.1f}")


if __name__ == "__main__":
    main()
