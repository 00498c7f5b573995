"""Command-line entry point: ``overlaydfl run | compare | gen-scenario``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .pipeline import (ConfigError, PipelineConfig, all_completed, compare_report, comparison_csv,
                       run_pipeline)
from .underlay import GENERATORS, ScenarioError, scenario_to_dict


def _cmd_run(args) -> int:
    try:
        config = PipelineConfig.load(args.config)
        if args.seed is not None:
            config.seed = args.seed
    except (ConfigError, ScenarioError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = run_pipeline(config, args.out)
    for name, entry in report["algorithms"].items():
        if entry["status"] == "ok":
            ttt = entry.get("time_to_target_s")
            print(f"{name}: {entry['n_links']} links, tau={entry['tau_s']:.6g}s, rho*={entry['rho_star']:.4f}"
                  + (f", time-to-target={ttt:.6g}s" if ttt is not None else ""))
        else:
            print(f"{name}: FAILED ({entry['error']})", file=sys.stderr)
    print(f"wrote {Path(args.out) / 'report.json'}")
    return 0 if all_completed(report) else 1


def _cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return 2
    try:
        rows = compare_report(reports, labels=args.reports)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = comparison_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gen(args) -> int:
    scenario = GENERATORS[args.generator](seed=args.seed)
    text = json.dumps(scenario_to_dict(scenario), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overlaydfl",
                                     description="Overlay design for decentralized learning over a shared underlay.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the design pipeline from a JSON config")
    run.add_argument("--config", required=True, help="pipeline config JSON")
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.set_defaults(func=_cmd_run)
    cmp_ = sub.add_parser("compare", help="rank algorithms across report.json files")
    cmp_.add_argument("reports", nargs="+")
    cmp_.add_argument("--out", default=None, help="write CSV here instead of stdout")
    cmp_.set_defaults(func=_cmd_compare)
    gen = sub.add_parser("gen-scenario", help="emit a synthetic scenario as JSON")
    gen.add_argument("--generator", required=True, choices=sorted(GENERATORS))
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default=None, help="write JSON here instead of stdout")
    gen.set_defaults(func=_cmd_gen)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
