"""Seeded synthetic feeds: per-symbol geometric random walks."""

from __future__ import annotations

import random
from typing import Optional

from .feedpipe import RawFeedEvent, format_text_line
from .model import PRICE_SCALE, EventType

STEP = 0.002  # max relative price move per event
MARKET = "SIM"

BAD_KINDS = ("malformed", "crossed", "future", "duplicate", "nonpositive")


def symbol_names(source: str, count: int, market: str = MARKET) -> list[str]:
    width = max(4, len(str(max(count - 1, 0))))
    if len(source) + width > 12:
        raise ValueError(f"source {source!r} too long for {count} symbols")
    return [f"{source}{i:0{width}d}.{market}" for i in range(count)]


class SyntheticFeed:
    """Generates one source's events; identical arguments give identical streams.

    Prices follow ``p' = p * (1 + d)`` with ``d`` uniform in ``[-STEP, STEP]``,
    rounded to the fixed-point grid; sizes are uniform in ``[1, 1000]``.
    """

    def __init__(
        self,
        source: str,
        symbols: int,
        seed: int | str,
        trade_pct: int = 50,
        bad_pct: int = 0,
        market: str = MARKET,
    ):
        if symbols <= 0:
            raise ValueError("need at least one symbol")
        if not 0 <= trade_pct <= 100 or not 0 <= bad_pct <= 100:
            raise ValueError("percentages must lie in 0..100")
        self.source = source
        self.rng = random.Random(seed)
        self.symbols = symbol_names(source, symbols, market)
        self.trade_pct = trade_pct
        self.bad_pct = bad_pct
        self.prices = [self.rng.randint(10, 500) * PRICE_SCALE for _ in self.symbols]
        self.seq = 0
        self.good_seq = 0
        self.last: dict[str, RawFeedEvent] = {}

    def next_event(self, ts_ms: int) -> RawFeedEvent:
        rng = self.rng
        i = rng.randrange(len(self.symbols))
        p = max(2, round(self.prices[i] * (1.0 + rng.uniform(-STEP, STEP))))
        self.prices[i] = p
        self.seq += 1
        self.good_seq = self.seq
        sym = self.symbols[i]
        if rng.randrange(100) < self.trade_pct:
            ev = RawFeedEvent(self.source, self.seq, sym, EventType.TRADE, price=p,
                              size=rng.randint(1, 1000), source_ts_ms=ts_ms)
        else:
            half = max(1, p * rng.randint(1, 10) // 20_000)
            ev = RawFeedEvent(self.source, self.seq, sym, EventType.QUOTE,
                              bid=max(1, p - half), ask=p + half, source_ts_ms=ts_ms)
        self.last[sym] = ev
        return ev

    def next_line(self, ts_ms: int) -> tuple[str, Optional[str]]:
        """Next text line and, when a bad record was injected, which kind."""
        if self.bad_pct and self.rng.randrange(100) < self.bad_pct:
            kind = BAD_KINDS[self.rng.randrange(len(BAD_KINDS))]
            return self._bad_line(kind, ts_ms), kind
        return format_text_line(self.next_event(ts_ms)), None

    def _bad_line(self, kind: str, ts_ms: int) -> str:
        sym = self.symbols[self.rng.randrange(len(self.symbols))]
        if kind == "duplicate" and self.good_seq == 0:
            kind = "malformed"
        if kind == "duplicate":
            seq = self.good_seq
        else:
            # burns a sequence number; the gap is legal since seqs need only increase
            self.seq += 1
            seq = self.seq
        if kind == "malformed":
            return f"{self.source}|{seq}|{sym}|TRADE|abc|10|||{ts_ms}"
        if kind == "crossed":
            return f"{self.source}|{seq}|{sym}|QUOTE|||10.0000|9.0000|{ts_ms}"
        if kind == "future":
            return f"{self.source}|{seq}|{sym}|TRADE|10.0000|5|||{ts_ms + 3_600_000}"
        if kind == "nonpositive":
            return f"{self.source}|{seq}|{sym}|TRADE|0.0000|5|||{ts_ms}"
        return f"{self.source}|{seq}|{sym}|TRADE|10.0000|5|||{ts_ms}"
