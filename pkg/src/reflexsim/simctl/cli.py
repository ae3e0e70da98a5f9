"""simctl: run scenarios, ablations and deadlock checks.

Exit codes: 0 success (``check``: Safe); 1 counterexample found or
invalid config; 2 check inconclusive; 3 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, ScenarioConfig, load
from .engine import csv_tables, run, to_json, write_report
from .experiments import ABLATIONS, EXIT_COUNTEREXAMPLE, ablate, check
from .scenarios import BUILTINS, scenario_builtin

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(target: str, args) -> ScenarioConfig:
    if target in BUILTINS and not os.path.exists(target):
        cfg = scenario_builtin(target)
    else:
        cfg = load(target)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.duration is not None:
        cfg.duration_ms = args.duration
    return cfg


def _emit(doc: dict, args, stem: str) -> None:
    if args.out:
        if "baseline" in doc:  # ablation: one set of files per side plus the ratios
            write_report(doc["baseline"], args.out, args.format, f"{stem}_baseline")
            write_report(doc["toggled"], args.out, args.format, f"{stem}_toggled")
            with open(os.path.join(args.out, f"{stem}_ratios.json"), "w") as fh:
                fh.write(json.dumps({k: doc[k] for k in ("schema", "scenario", "toggle", "ratios")},
                                    indent=2, sort_keys=True) + "\n")
        else:
            write_report(doc, args.out, args.format, stem)
        print(f"wrote {stem} to {args.out}")
    elif args.format == "csv" and "baseline" not in doc:
        for name, text in csv_tables(doc).items():
            print(f"# {name}")
            sys.stdout.write(text)
    else:
        sys.stdout.write(to_json(doc))


def main(argv: list[str] | None = None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--duration", type=float, default=None, help="override the duration (ms)")
    common.add_argument("--out", default=None, help="directory for report files (default: stdout)")
    common.add_argument("--format", choices=("json", "csv", "both"), default="json")

    p = _Parser(prog="simctl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    r = sub.add_parser("run", parents=[common], help="simulate a scenario and report")
    r.add_argument("scenario", help="config file or builtin name")
    r.add_argument("--no-legacy", action="store_true", help="skip the legacy baseline run")
    a = sub.add_parser("ablate", parents=[common], help="baseline vs one toggle flipped")
    a.add_argument("scenario")
    a.add_argument("toggle", choices=sorted(ABLATIONS))
    c = sub.add_parser("check", parents=[common], help="exhaustive deadlock check of the sharing topology")
    c.add_argument("scenario")
    c.add_argument("--bound", type=int, default=200)
    c.add_argument("--no-regulation", action="store_true", help="drop the owner-order regulation")
    s = sub.add_parser("scenario", parents=[common], help="print a builtin scenario config")
    s.add_argument("name", choices=sorted(BUILTINS))
    v = sub.add_parser("validate", parents=[common], help="validate a config file")
    v.add_argument("scenario")
    args = p.parse_args(argv)

    try:
        if args.verb == "scenario":
            cfg = scenario_builtin(args.name)
            if args.seed is not None:
                cfg.seed = args.seed
            if args.duration is not None:
                cfg.duration_ms = args.duration
            text = cfg.to_json()
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                with open(os.path.join(args.out, f"{args.name}.json"), "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = _resolve(args.scenario, args)
        if args.verb == "validate":
            print(f"{cfg.name}: ok")
            return EXIT_OK
        if args.verb == "run":
            _emit(run(cfg, legacy_baseline=not args.no_legacy), args, cfg.name)
            return EXIT_OK
        if args.verb == "ablate":
            _emit(ablate(cfg, args.toggle), args, f"{cfg.name}_{args.toggle}")
            return EXIT_OK
        if args.verb == "check":
            if args.no_regulation:
                cfg = cfg.with_toggles(regulation=False)
            verdict, code = check(cfg, args.bound)
            print(verdict.render() if code == EXIT_COUNTEREXAMPLE else str(verdict))
            return code
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"simctl: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
