"""``tracecache`` command line: offline trace analysis and simulations."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Optional, Sequence, TextIO

from .miner import CriteriaThresholds, TooManyErrors, TraceReader, aggregate, build_model
from .simulation import InvalidScenario, Scenario, bookstore_app

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_table(report: dict[str, Any]) -> str:
    header = ("method", "decision", "criterion", "calls", "staticity", "changeability", "shareability", "cost_us")
    rows = [
        (
            m["method"], m["decision"], m["deciding_criterion"], m["call_count"],
            m["staticity"], m["changeability"], m["shareability"], m["cost_mean_us"],
        )
        for m in report["methods"]
    ]
    cells = [header] + [tuple(_fmt(v) for v in row) for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def analyze(
    lines: Sequence[str] | TextIO,
    thresholds: CriteriaThresholds,
    max_errors: Optional[int] = None,
) -> dict[str, Any]:
    """Build the advisor report for a trace log. Pure in its inputs."""
    reader = TraceReader(lines, max_errors)
    records = list(reader)
    model = build_model(aggregate(records), thresholds, built_at=max((r.at_us for r in records), default=0))
    report = model.report()
    report["input"] = {"records": len(records), "malformed_lines": reader.malformed}
    return report


def cmd_analyze(args: argparse.Namespace, out: TextIO) -> int:
    try:
        thresholds = CriteriaThresholds(
            confidence=args.confidence,
            margin=args.margin,
            k_changeability=args.k_changeability,
            k_shareability=args.k_shareability,
            k_expensiveness=args.k_expensiveness,
        )
    except ValueError as exc:
        print(f"tracecache: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        with open(args.traces, encoding="utf-8") as fh:
            report = analyze(fh, thresholds, args.max_errors)
    except (OSError, UnicodeDecodeError, TooManyErrors) as exc:
        print(f"tracecache: cannot analyze {args.traces}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.format == "json":
        out.write(json.dumps(report, indent=2) + "\n")
    else:
        out.write(render_table(report))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, out: TextIO) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except InvalidScenario as exc:
        print(f"tracecache: {exc}", file=sys.stderr)
        return EXIT_INPUT
    report = scenario.run(seed=args.seed)
    text = report.to_json()
    if args.out == "-":
        out.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_example_scenario(args: argparse.Namespace, out: TextIO) -> int:
    doc = {
        "app": bookstore_app().to_dict(),
        "workload": {"users": [1, 5], "requests_per_user": 5000, "read_fraction": 0.8, "seed": 7, "repetitions": 3},
        "engine": {
            "mining_interval": 10.0,
            "warmup_window": 30.0,
            "trace_window": 30.0,
            "cache": {"capacity": 8 * 1024 * 1024, "ttl": 3600.0, "policy": "TtlOnly"},
            "seed": 7,
        },
        "configurations": ["NO", "AP", "DEV"],
        "dev_methods": ["catalog", "best_sellers"],
        "virtual_time": True,
    }
    out.write(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracecache", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = CriteriaThresholds()
    a = sub.add_parser("analyze", help="mine a trace log and print cacheability verdicts")
    a.add_argument("--traces", required=True, help="trace log (JSON Lines)")
    a.add_argument("--confidence", type=float, default=defaults.confidence)
    a.add_argument("--margin", type=float, default=defaults.margin)
    a.add_argument("--k-changeability", type=float, default=defaults.k_changeability)
    a.add_argument("--k-shareability", type=float, default=defaults.k_shareability)
    a.add_argument("--k-expensiveness", type=float, default=defaults.k_expensiveness)
    a.add_argument("--format", choices=("table", "json"), default="table")
    a.add_argument("--max-errors", type=int, default=100, help="malformed lines tolerated before giving up")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a workload scenario and write a JSON report")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True, help="report path, or - for stdout")
    s.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("example-scenario", help="print the built-in bookstore scenario")
    e.set_defaults(func=cmd_example_scenario)
    return parser


def main(argv: Optional[Sequence[str]] = None, out: Optional[TextIO] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args, out or sys.stdout)
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        logging.getLogger(__name__).exception("internal error")
        print(f"tracecache: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
