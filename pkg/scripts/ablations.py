"""Flip one toggle per benchmark at several seeds and print the ratios."""

import argparse
import json

from reflexsim.simctl import scenario_builtin
from reflexsim.simctl.experiments import ablate

PAIRS = [("uwave", "intra_batching_off", "state_checks"),
         ("raps", "inter_batching_off", "total_requester_latency"),
         ("pedometer", "role_swap", "central_energy")]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--json", action="store_true", help="dump all ratios as JSON")
    args = ap.parse_args()
    table = {}
    for scenario, toggle, key in PAIRS:
        for seed in range(args.seeds):
            cfg = scenario_builtin(scenario)
            cfg.seed = seed
            ratios = ablate(cfg, toggle)["ratios"]
            table.setdefault(f"{scenario}/{toggle}", []).append(ratios)
            print(f"{scenario:<10} {toggle:<19} seed {seed}: {key} x{ratios[key]}", flush=True)
    if args.json:
        print(json.dumps(table, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
