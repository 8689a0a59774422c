"""Command-line entry points: ``feedgen``, ``brokerd``, ``subctl`` and ``simrun``.

Each is also reachable as ``tickermesh <name> ...`` or ``python3 -m tickermesh.cli <name> ...``.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import sys

from .brokerd import run_brokerd
from .common import EXIT_USAGE
from .feedgen import run_feedgen
from .simrun import run_simrun
from .subctl import run_subctl

COMMANDS = {
    "feedgen": run_feedgen,
    "brokerd": run_brokerd,
    "subctl": run_subctl,
    "simrun": run_simrun,
}

USAGE = "usage: tickermesh {" + ",".join(COMMANDS) + "} [options]\n"


def run(argv: list[str]) -> int:
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(USAGE) if argv else sys.stderr.write(USAGE)
        return 0 if argv else EXIT_USAGE
    cmd = COMMANDS.get(argv[0])
    if cmd is None:
        sys.stderr.write(USAGE + f"tickermesh: unknown command {argv[0]!r}\n")
        return EXIT_USAGE
    return cmd(argv[1:])


def main() -> None:
    sys.exit(run(sys.argv[1:]))


__all__ = ["COMMANDS", "main", "run", "run_brokerd", "run_feedgen", "run_simrun", "run_subctl"]
