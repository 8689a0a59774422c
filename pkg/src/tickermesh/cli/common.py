"""Pieces shared by the command-line tools."""

from __future__ import annotations

import argparse
import logging
import sys

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments discovered after argparse accepted them."""


def parse_addr(text: str) -> tuple[str, int]:
    """``host:port`` (host may be empty for all interfaces)."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise argparse.ArgumentTypeError(f"expected <addr:port>, got {text!r}")
    return host.strip("[]") or "0.0.0.0", int(port)


def non_negative(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0: {v}")
    return v


def positive(text: str) -> int:
    v = non_negative(text)
    if v == 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def percent(text: str) -> int:
    v = non_negative(text)
    if v > 100:
        raise argparse.ArgumentTypeError(f"must lie in 0..100: {v}")
    return v


def add_verbosity(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def setup_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def parse_or_exit(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """argparse exits 2 with usage on bad flags; keep that, but return instead of raising."""
    try:
        return parser.parse_args(argv)
    except SystemExit as exc:
        raise _Exit(exc.code if isinstance(exc.code, int) else EXIT_USAGE) from None


class _Exit(Exception):
    def __init__(self, code: int):
        self.code = code


def guarded(fn):
    """Run ``fn(argv)`` and turn parser exits into return codes."""

    def wrapper(argv=None) -> int:
        try:
            return fn(argv)
        except _Exit as exc:
            return exc.code

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper
