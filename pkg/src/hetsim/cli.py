"""Command-line entry point: ``hetsim validate|run|bench-suite``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as E
from .hypervisor import SimulationError

EXIT_OK, EXIT_INVALID, EXIT_BAND = 0, 2, 3


def _load(source: str) -> E.ScenarioConfig:
    return E.load_scenario(source)


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.scenario)
    except E.ScenarioError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    problems = E.validate_config(cfg)
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {cfg.name} ({len(cfg.workloads)} workload partition(s), "
          f"{len(cfg.schedule.windows)} windows, major_frame={cfg.schedule.major_frame})")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.trace and args.mode == E.FAST:
        print("invalid: --trace needs --mode detailed (fast mode keeps no trace)", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = _load(args.scenario)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        keep = {}
        report = E.run_config(cfg.with_mode(args.mode), keep=keep)
    except (E.ScenarioError, E.ValidationError) as exc:
        for line in getattr(exc, "problems", [str(exc)]):
            print(f"invalid: {line}", file=sys.stderr)
        return EXIT_INVALID
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.trace:
        Path(args.trace).write_text(keep["outcome"].result.trace_text())
    sys.stdout.write(E.emit_report(report, args.report))
    return EXIT_OK


def cmd_bench(args) -> int:
    result = E.bench_suite()
    print("\n".join(result.lines()))
    ok = result.passed
    print(f"bench-suite: {'all bands hold' if ok else 'band violation'}")
    return EXIT_OK if ok else EXIT_BAND


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetsim", description="Partitioned heterogeneous SoC simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file or shipped scenario")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run a scenario and print its report")
    r.add_argument("scenario")
    r.add_argument("--mode", choices=(E.DETAILED, E.FAST), default=E.DETAILED)
    r.add_argument("--trace", metavar="PATH", help="write the event trace here")
    r.add_argument("--report", choices=("table", "records"), default="table")
    r.add_argument("--seed", type=int, help="override the weight seed")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench-suite", help="run all shipped scenarios and check ratio bands")
    b.set_defaults(func=cmd_bench)

    sub.add_parser("list", help="list shipped scenarios").set_defaults(
        func=lambda a: print("\n".join(E.shipped_scenarios())) or EXIT_OK)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
