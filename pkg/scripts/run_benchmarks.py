"""Run every builtin scenario against its legacy baseline and summarise."""

import argparse
import os

from reflexsim.simctl import BUILTINS, run, scenario_builtin, write_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/benchmarks")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    print(f"{'scenario':<11} {'power mW':>9} {'legacy mW':>10} {'saved %':>8} {'req ms':>7} {'owner ms':>9} "
          f"{'checks %':>9} {'footprint':>10}")
    for name in sorted(BUILTINS):
        cfg = scenario_builtin(name)
        cfg.seed = args.seed
        r = run(cfg)
        write_report(r, args.out, "both", name)
        frac = max(m["state_check_fraction"] for mid, m in r["modules"].items() if mid != "phone")
        fp = sum(f["bytes"] for f in r["footprint"].values())
        print(f"{name:<11} {r['system_power_mW']:9.2f} {r['legacy']['system_power_mW']:10.2f} "
              f"{r['power_vs_legacy']['reduction_pct']:8.1f} {r['latency']['requester']['latency']['mean']:7.1f} "
              f"{r['latency']['owner']['mean']:9.1f} {100 * frac:9.4f} {fp:8d} B")


if __name__ == "__main__":
    main()
