"""Bounded versus growing pending queue around the capacity of one replica.

The ``fig1`` scenario serves about 6.1 req/s.  Offering 6 req/s keeps the
queue bounded; offering 7 req/s makes it grow by roughly the 1 req/s excess.
"""

from __future__ import annotations

import argparse
from importlib import resources

from servescale.simulator import load_scenario
from servescale.stats import ols_fit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sc = load_scenario(resources.files("servescale") / "data" / "fig1.json")
    for rate in (6.0, 7.0):
        res = sc.with_rate(rate, seed=args.seed).run()
        n_p = res.column("n_p")
        fit = ols_fit(res.column("ts"), n_p)
        print(f"rate {rate:.0f} req/s: max pending {n_p.max():6.1f}, pending trend {fit.slope:+.3f} req/s, "
              f"mean latency {res.latency * 1000:.1f} ms/token")


if __name__ == "__main__":
    main()
