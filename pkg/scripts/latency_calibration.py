"""Pooled requester/owner latency over the builtin scenarios, per seed."""

import argparse

from reflexsim.simctl import BUILTINS, run, scenario_builtin
from reflexsim.simctl.experiments import pooled_latency

BANDS = {"requester_latency": (33, 49), "requester_transport": (26, 33), "requester_lazy": (5, 15), "owner": (15, 25)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=4)
    args = ap.parse_args()
    for seed in range(args.seeds):
        reports = []
        for name in sorted(BUILTINS):
            cfg = scenario_builtin(name)
            cfg.seed = seed
            reports.append(run(cfg, legacy_baseline=False))
        p = pooled_latency(reports)
        cells = [f"{k} {p[k]:.1f}{'' if lo <= p[k] <= hi else '!'}" for k, (lo, hi) in BANDS.items()]
        print(f"seed {seed}: " + ", ".join(cells) + f"  (n={p['requester_samples']}/{p['owner_samples']})")


if __name__ == "__main__":
    main()
