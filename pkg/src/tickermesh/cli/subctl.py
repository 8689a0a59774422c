"""``subctl``: subscribe at a broker and print what arrives, one feed-grammar line each."""

from __future__ import annotations

import argparse
import os
import socket
import sys
import time
from typing import Optional

from ..feedpipe import RawFeedEvent, format_text_line
from ..model import EventNotification, FilterSyntaxError, QoI, format_decimal, parse_filter_expr
from ..wire import Credit, FrameDecoder, Hello, PeerKind, ProtocolError, Publish, Subscribe, encode_message
from .common import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, add_verbosity, guarded, non_negative, parse_addr, \
    parse_or_exit, setup_logging

WINDOW = 256  # frames in flight when reading at full speed


def format_delivery(n: EventNotification) -> str:
    """The text feed line for ``n`` plus ``|O=..|H=..|L=..|V=..`` from its enrichment."""
    raw = RawFeedEvent(n.source, n.seq, n.symbol.rendered, n.event_type, n.price, n.size, n.bid, n.ask,
                       n.source_ts_ms)
    e = n.enriched

    def dec(v: Optional[int]) -> str:
        return "" if v is None else format_decimal(v)

    if e is None:
        suffix = "|O=|H=|L=|V="
    else:
        suffix = f"|O={dec(e.day_open)}|H={dec(e.day_high)}|L={dec(e.day_low)}|V={e.total_volume}"
    return format_text_line(raw) + suffix


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subctl", description="Subscribe at a broker and print deliveries.")
    p.add_argument("--connect", required=True, type=parse_addr, metavar="ADDR:PORT")
    p.add_argument("--qoi", required=True, choices=("CONFLATED", "COMPLETE"))
    p.add_argument("--filter", default="", help='filter expression, e.g. "source=X type=TRADE"')
    p.add_argument("--count", type=non_negative, help="exit after this many deliveries")
    p.add_argument("--drain-rate", type=non_negative, help="read at most this many per second")
    p.add_argument("--idle-ms", type=non_negative, help="exit once nothing arrived for this long")
    add_verbosity(p)
    return p


@guarded
def run_subctl(argv=None, out=None) -> int:
    args = parse_or_exit(build_parser(), argv)
    setup_logging(args.verbose)
    out = out or sys.stdout
    try:
        flt = parse_filter_expr(args.filter)
    except FilterSyntaxError as exc:
        print(f"subctl: invalid filter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    host, port = args.connect
    try:
        sock = socket.create_connection((host, port), timeout=5)
    except OSError as exc:
        print(f"subctl: cannot connect to {host}:{port}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    paced = bool(args.drain_rate)
    window = 1 if paced else WINDOW
    with sock:
        sock.sendall(
            encode_message(Hello(f"subctl-{os.getpid()}", PeerKind.CLIENT))
            + encode_message(Subscribe(1, QoI[args.qoi], flt))
            + encode_message(Credit(window))
        )
        sock.settimeout(args.idle_ms / 1000 if args.idle_ms else None)
        decoder = FrameDecoder()
        got = owed = 0
        next_read = time.monotonic()
        try:
            while args.count is None or got < args.count:
                try:
                    data = sock.recv(65536)
                except socket.timeout:
                    return EXIT_OK
                if not data:
                    print("subctl: broker closed the connection", file=sys.stderr)
                    return EXIT_FAILURE
                for msg in decoder.feed(data):
                    if not isinstance(msg, Publish):
                        continue
                    if paced:
                        delay = next_read - time.monotonic()
                        if delay > 0:
                            time.sleep(delay)
                        next_read = max(next_read, time.monotonic()) + 1 / args.drain_rate
                    out.write(format_delivery(msg.notification) + "\n")
                    out.flush()
                    got += 1
                    owed += 1
                    if args.count is not None and got >= args.count:
                        break
                if owed and (paced or owed >= WINDOW // 2):
                    sock.sendall(encode_message(Credit(owed)))
                    owed = 0
        except KeyboardInterrupt:
            return EXIT_OK
        except (OSError, ProtocolError) as exc:
            print(f"subctl: {exc}", file=sys.stderr)
            return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(run_subctl())
