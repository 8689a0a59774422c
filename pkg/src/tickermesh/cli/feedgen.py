"""``feedgen``: seeded synthetic feed to a file or a broker socket."""

from __future__ import annotations

import argparse
import logging
import re
import socket
import sys
import time

from ..feedpipe import FeedReject, encode_raw_frame, parse_text_line
from ..model import frame
from ..synth import SyntheticFeed
from .common import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, add_verbosity, guarded, non_negative, parse_addr, \
    parse_or_exit, percent, positive, setup_logging

log = logging.getLogger("tickermesh.feedgen")

# File output is stamped from a fixed origin so that equal seeds give equal bytes.
FILE_EPOCH_MS = 1_700_000_000_000
SOURCE_RE = re.compile(r"[A-Z0-9]{1,8}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feedgen", description="Emit seeded synthetic market events.")
    dest = p.add_mutually_exclusive_group(required=True)
    dest.add_argument("--target", type=parse_addr, metavar="ADDR:PORT", help="stream to a broker")
    dest.add_argument("--out", metavar="FILE", help="write to a file ('-' for stdout)")
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.add_argument("--source", default="SIM", help="source name, [A-Z0-9]{1,8}")
    p.add_argument("--symbols", type=positive, default=16)
    p.add_argument("--rate", type=positive, default=100, help="events per second")
    n = p.add_mutually_exclusive_group()
    n.add_argument("--count", type=non_negative)
    n.add_argument("--duration-ms", type=non_negative)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trade-pct", type=percent, default=50)
    p.add_argument("--bad-pct", type=percent, default=0, help="share of deliberately bad records")
    p.add_argument("--start-ts-ms", type=non_negative, default=None,
                   help=f"first event timestamp (default: {FILE_EPOCH_MS} for files, wall clock for --target)")
    add_verbosity(p)
    return p


def event_count(args) -> int:
    if args.count is not None:
        return args.count
    if args.duration_ms is not None:
        return args.duration_ms * args.rate // 1000
    return 1000


def encode(feed: SyntheticFeed, fmt: str, ts_ms: int) -> bytes:
    line, _ = feed.next_line(ts_ms)
    if fmt == "text":
        return line.encode("ascii") + b"\n"
    try:
        return encode_raw_frame(parse_text_line(line))
    except FeedReject:
        # an injected malformed record has no binary form; send a frame with a junk body
        return frame(b"\x00" + line.encode("ascii")[:32])


def generate(args, ts0: int):
    """Yield ``(due_offset_ms, bytes)`` for every event."""
    feed = SyntheticFeed(args.source, args.symbols, args.seed, args.trade_pct, args.bad_pct)
    for k in range(event_count(args)):
        offset = k * 1000 // args.rate
        yield offset, encode(feed, args.format, ts0 + offset)


def _to_file(args) -> int:
    ts0 = FILE_EPOCH_MS if args.start_ts_ms is None else args.start_ts_ms
    try:
        out = sys.stdout.buffer if args.out == "-" else open(args.out, "wb")
    except OSError as exc:
        print(f"feedgen: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        for _, data in generate(args, ts0):
            out.write(data)
    finally:
        if out is not sys.stdout.buffer:
            out.close()
        else:
            out.flush()
    return EXIT_OK


def _to_socket(args) -> int:
    host, port = args.target
    try:
        sock = socket.create_connection((host, port), timeout=5)
    except OSError as exc:
        print(f"feedgen: cannot reach {host}:{port}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    start = time.monotonic()
    ts0 = int(time.time() * 1000) if args.start_ts_ms is None else args.start_ts_ms
    sent = 0
    try:
        with sock:
            for offset, data in generate(args, ts0):
                delay = start + offset / 1000 - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                sock.sendall(data)
                sent += 1
    except OSError as exc:
        print(f"feedgen: connection lost after {sent} events: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    log.info("sent %d events", sent)
    return EXIT_OK


@guarded
def run_feedgen(argv=None) -> int:
    args = parse_or_exit(build_parser(), argv)
    setup_logging(args.verbose)
    try:
        if not SOURCE_RE.fullmatch(args.source):
            raise ValueError(f"bad source name {args.source!r}, want [A-Z0-9]{{1,8}}")
        SyntheticFeed(args.source, args.symbols, args.seed)
    except ValueError as exc:
        print(f"feedgen: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out is not None:
        return _to_file(args)
    return _to_socket(args)


def main() -> None:
    sys.exit(run_feedgen())
