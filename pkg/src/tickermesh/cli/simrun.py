"""``simrun``: run a scenario in the simulator, verify it, print the report.

Exit 0 when every check passes, 1 on violations, 2 on a bad scenario file.
"""

from __future__ import annotations

import argparse
import sys

from ..simnet import ScenarioError, load_scenario, run, verify
from .common import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, add_verbosity, guarded, parse_or_exit, setup_logging


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simrun", description="Simulate a broker mesh scenario and verify it.")
    p.add_argument("scenario", help="scenario file")
    p.add_argument("--log", metavar="FILE", help="write the full event log here")
    p.add_argument("--report", metavar="FILE", help="write the report (table and records) here")
    p.add_argument("--check-log", metavar="FILE",
                   help="verify an existing event log against the scenario instead of running it")
    p.add_argument("--wire", action="store_true", help="round-trip every message through the wire codec")
    add_verbosity(p)
    return p


def _read(path: str) -> str:
    with open(path, encoding="ascii") as fh:
        return fh.read()


@guarded
def run_simrun(argv=None, out=None) -> int:
    args = parse_or_exit(build_parser(), argv)
    setup_logging(args.verbose)
    out = out or sys.stdout
    try:
        sc = load_scenario(_read(args.scenario))
    except OSError as exc:
        print(f"simrun: cannot read {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnicodeDecodeError as exc:
        print(f"simrun: {args.scenario}: not ASCII: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        print(f"simrun: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if args.check_log:
        try:
            lines = _read(args.check_log).splitlines()
        except OSError as exc:
            print(f"simrun: cannot read {args.check_log}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        violations = verify(None, sc, lines)
        for v in violations:
            out.write(f"violation: {v}\n")
        out.write(f"{len(lines)} log lines, {len(violations)} violation(s)\n")
        return EXIT_FAILURE if violations else EXIT_OK

    report = run(sc, wire=args.wire)
    try:
        if args.log:
            with open(args.log, "w", encoding="ascii") as fh:
                fh.write("\n".join(report.event_log) + "\n")
        if args.report:
            with open(args.report, "w", encoding="ascii") as fh:
                fh.write(report.render())
    except OSError as exc:
        print(f"simrun: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    out.write(report.render())
    return EXIT_FAILURE if report.violations else EXIT_OK


def main() -> None:
    sys.exit(run_simrun())
