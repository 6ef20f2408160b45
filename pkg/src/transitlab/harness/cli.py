"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 invariant or oracle violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys

from ..policies.base import POLICY_NAMES
from .config import Config, ConfigError, variant_toggle
from .crash import btt_crash_enumeration, randomized_crash_tests
from .metrics import breakdown_report, read_trace_csv
from .runner import ExperimentReport, System, breakdown_table, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VIOLATION = 3


def _load_config(args) -> Config:
    cfg = Config.load(args.config)
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        sect, _, name = key.partition(".")
        overrides[f"{sect}__{name}"] = value
    return cfg.override(**overrides) if overrides else cfg


def _emit(report: ExperimentReport, fmt: str) -> None:
    print(report.to_json() if fmt == "json" else report.to_text())


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.json_out:
        cfg = cfg.override(run__report_json=args.json_out)
    if args.trace_out:
        cfg = cfg.override(run__trace_csv=args.trace_out)
    report = run_experiment(cfg)
    _emit(report, args.format)
    for v in report.violations[:20]:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_VIOLATION if report.violations else EXIT_OK


def cmd_breakdown(args) -> int:
    if args.trace:
        bd = breakdown_report(read_trace_csv(args.trace))
        violations = []
    else:
        report = run_experiment(_load_config(args))
        bd, violations = report.breakdown, report.violations
    if args.format == "json":
        print(json.dumps(bd, sort_keys=True, indent=2))
    else:
        print(breakdown_table(bd))
    return EXIT_VIOLATION if violations else EXIT_OK


def cmd_ablate(args) -> int:
    base = _load_config(args).override(policy__name="caiti")
    variants = [
        ("caiti", base),
        ("w/o EE", variant_toggle(base, eager=False)),
        ("w/o BP", variant_toggle(base, bypass=False)),
    ]
    rows = []
    bad = False
    for label, cfg in variants:
        r = run_experiment(cfg)
        bad = bad or bool(r.violations)
        rows.append({
            "variant": label,
            "avg_ns": r.avg_ns,
            "p9999_ns": r.p9999_ns,
            "critical_writes": r.device_writes["critical"],
            "background_writes": r.device_writes["background"],
            "eviction_and_write": r.breakdown["occurrences"].get("cache_eviction_and_write", 0),
            "bypass": r.cache.get("bypass", 0),
            "violations": len(r.violations),
        })
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        cols = list(rows[0])
        print("  ".join(f"{c:>18}" for c in cols))
        for row in rows:
            print("  ".join(f"{row[c]:>18}" if not isinstance(row[c], float) else f"{row[c]:>18.1f}" for c in cols))
    return EXIT_VIOLATION if bad else EXIT_OK


def cmd_crash_test(args) -> int:
    if args.btt:
        writes = tuple(tuple(int(x) for x in lane.split(",") if x) for lane in args.writes.split(";"))
        verdict = btt_crash_enumeration(writes, nlba=args.nlba, max_preemptions=args.max_preemptions)
        print(f"btt: {verdict.runs} schedules, {verdict.crash_points} crash points, "
              f"{verdict.images_checked} distinct images, {len(verdict.violations)} violations")
    else:
        policies = POLICY_NAMES if args.policy == "all" else (args.policy,)
        verdict = None
        for name in policies:
            v = randomized_crash_tests(name, trials=args.trials, seed=args.seed)
            print(f"{name}: {v.runs} runs, {v.crash_points} crashed mid-run, {len(v.violations)} violations")
            verdict = v if verdict is None else verdict.merge(v)
    for v in verdict.violations[:20]:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_OK if verdict.ok else EXIT_VIOLATION


def cmd_trace_export(args) -> int:
    from ..workload import export_trace

    sys_ = System(_load_config(args))
    streams = sys_.streams()
    # round-robin across jobs, so that replaying with the same numjobs
    # hands every job its own requests back
    merged = (r for group in itertools.zip_longest(*streams) for r in group if r is not None)
    n = export_trace((dataclasses.replace(r, id=i) for i, r in enumerate(merged)), args.output)
    print(f"wrote {n} requests to {args.output}")
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.report) as fh:
        report = ExperimentReport.from_json(fh.read())
    _emit(report, args.format)
    return EXIT_VIOLATION if report.violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transitlab", description="Block-device write-cache simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="TOML config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        return sp

    def with_format(sp):
        sp.add_argument("--format", choices=("text", "json"), default="text")
        return sp

    sp = with_format(with_config(sub.add_parser("run", help="run one experiment")))
    sp.add_argument("--json-out", help="also write the JSON report here")
    sp.add_argument("--trace-out", help="write the per-request latency CSV here")
    sp.set_defaults(func=cmd_run)

    sp = with_format(with_config(sub.add_parser("breakdown", help="per-category time breakdown")))
    sp.add_argument("--trace", help="per-request latency CSV from 'run --trace-out' (skips the run)")
    sp.set_defaults(func=cmd_breakdown)

    sp = with_format(with_config(sub.add_parser("ablate", help="caiti against its w/o EE and w/o BP variants")))
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("crash-test", help="crash injection with oracle validation")
    sp.add_argument("--policy", default="all", choices=("all",) + POLICY_NAMES)
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--btt", action="store_true", help="enumerate schedules and crash points of raw BTT writers")
    sp.add_argument("--writes", default="0,1;1,0", help="lba lists per lane, e.g. '0,1;1,0'")
    sp.add_argument("--nlba", type=int, default=4)
    sp.add_argument("--max-preemptions", type=int, default=None)
    sp.set_defaults(func=cmd_crash_test)

    sp = with_config(sub.add_parser("trace-export", help="write the configured workload as a request CSV"))
    sp.add_argument("output")
    sp.set_defaults(func=cmd_trace_export)

    sp = with_format(sub.add_parser("report", help="print a saved JSON report"))
    sp.add_argument("report")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
