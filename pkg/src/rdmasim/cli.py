"""Command-line benchmark driver.

Subcommands mirror the experiment structure: ``control-plane`` measures
cold/warm/fork start end-to-end times under a scheme, ``data-plane`` sweeps
throughput/latency for READ/WRITE/SEND-RECV in sync/async modes, ``check``
evaluates exported results against the start-time requirement rules.
"""

from __future__ import annotations

import argparse
import sys

from .bench import (
    DEFAULT_BATCH,
    DEFAULT_REPEATS,
    BenchResult,
    DataOp,
    Mode,
    Scheme,
    bench_control_plane,
    bench_data_plane,
    export,
    load_results,
    requirement_check,
)
from .clock import WallClock
from .costmodel import CostModel
from .errors import RdmaSimError
from .orchestrator import StartKind
from .scenario import load_scenario


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scheme", choices=[s.value for s in Scheme], default="swift")
    parser.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    parser.add_argument("--config", metavar="FILE",
                        help="cost model or full scenario config (INI)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", metavar="PATH", help="write results to this file")
    parser.add_argument("--format", choices=["csv", "json"], default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench",
                                     description="RDMA control/data plane benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    cp = sub.add_parser("control-plane", help="cold/warm/fork start end-to-end times")
    cp.add_argument("--start", choices=["cold", "warm", "fork"], required=True)
    cp.add_argument("--events", metavar="PATH",
                    help="dump the last run's event log as JSONL")
    _add_common(cp)

    dp = sub.add_parser("data-plane", help="throughput/latency sweep")
    dp.add_argument("--op", choices=[o.value for o in DataOp], required=True)
    dp.add_argument("--mode", choices=[m.value for m in Mode], required=True)
    dp.add_argument("--threads", type=int, default=1)
    dp.add_argument("--duration", type=float, default=1.0, metavar="SEC",
                    help="virtual seconds per run")
    dp.add_argument("--batch", type=int, default=DEFAULT_BATCH,
                    help="outstanding requests per client in async mode")
    dp.add_argument("--wall-clock", action="store_true",
                    help="run on real time with real concurrent workers")
    _add_common(dp)

    chk = sub.add_parser("check", help="evaluate start-time requirement rules")
    chk.add_argument("--in", dest="infile", required=True, metavar="PATH")
    return parser


def _load_config(args):
    """Returns (cost model, orchestrator config or None) from --config."""
    if not args.config:
        return CostModel.default(), None
    scenario = load_scenario(args.config)
    return scenario.cost_model, scenario.orch


def _finish(result: BenchResult, args) -> int:
    agg = result.aggregate()
    summary = ", ".join(f"{k}={v:.4g}" for k, v in agg.items())
    print(f"{result.scenario_id} scheme={result.scheme.value} repeats={result.repeats}")
    print(f"  aggregate: {summary}")
    if result.baseline_us is not None:
        overhead = (agg["end_to_end_us"] - result.baseline_us) / result.baseline_us
        print(f"  baseline_us={result.baseline_us!r} overhead={overhead:.2%}")
    if args.out:
        export([result], args.format, args.out)
        print(f"  wrote {args.format} to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "control-plane":
            cost_model, orch_config = _load_config(args)
            result = bench_control_plane(StartKind[args.start.upper()],
                                         Scheme.parse(args.scheme),
                                         repeats=args.repeats, cost_model=cost_model,
                                         seed=args.seed, config=orch_config,
                                         events_path=args.events)
            return _finish(result, args)
        if args.command == "data-plane":
            cost_model, _ = _load_config(args)
            wall = WallClock() if args.wall_clock else None
            result = bench_data_plane(DataOp(args.op), Mode(args.mode), args.threads,
                                      args.duration, Scheme.parse(args.scheme),
                                      cost_model=cost_model, seed=args.seed,
                                      batch=args.batch, repeats=args.repeats,
                                      wall_clock=wall)
            return _finish(result, args)
        if args.command == "check":
            report = requirement_check(load_results(args.infile))
            for line in report.lines():
                print(line)
            return 0 if report.ok else 2
    except (RdmaSimError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
