"""Per-symbol trading-day state, real-time enrichment and derived-event detection."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

from .model import (
    EnrichmentBlock,
    EventNotification,
    EventType,
    SymbolKey,
)

DAY_MS = 86_400_000
DERIVED_SOURCE = "DERIVED"


def trading_day(ts_ms: int) -> int:
    """UTC calendar day of an epoch-millisecond timestamp."""
    return ts_ms // DAY_MS


@dataclass(frozen=True, slots=True)
class SymbolDayState:
    symbol: SymbolKey
    trading_day: int
    open: Optional[int] = None
    high: Optional[int] = None
    low: Optional[int] = None
    last: Optional[int] = None
    total_volume: int = 0
    trade_count: int = 0
    prev_close: Optional[int] = None
    best_bid: Optional[int] = None
    best_ask: Optional[int] = None

    def block(self) -> EnrichmentBlock:
        return EnrichmentBlock(
            day_open=self.open,
            day_high=self.high,
            day_low=self.low,
            last=self.last,
            total_volume=self.total_volume,
            trade_count=self.trade_count,
            prev_close=self.prev_close,
        )


class DerivedKind(Enum):
    NEW_DAY_HIGH = "NEW_DAY_HIGH"
    NEW_DAY_LOW = "NEW_DAY_LOW"
    VOLUME_THRESHOLD_CROSSED = "VOLUME_THRESHOLD_CROSSED"
    QUOTE_SPREAD_ALERT = "QUOTE_SPREAD_ALERT"


@dataclass(frozen=True, slots=True)
class DerivedEvent:
    kind: DerivedKind
    symbol: SymbolKey
    trigger: tuple[str, int]
    payload: tuple[int, ...]
    ts_ms: int


@dataclass
class RuleSet:
    default_volume_threshold: Optional[int] = None
    volume_thresholds: dict[SymbolKey, int] | None = None
    max_spread_bps: Optional[int] = None

    def __post_init__(self) -> None:
        if self.volume_thresholds is None:
            self.volume_thresholds = {}
        values = list(self.volume_thresholds.values())
        if self.default_volume_threshold is not None:
            values.append(self.default_volume_threshold)
        if any(v <= 0 for v in values):
            raise ValueError("volume thresholds must be positive")
        if self.max_spread_bps is not None and self.max_spread_bps <= 0:
            raise ValueError("max_spread_bps must be positive")

    def threshold_for(self, symbol: SymbolKey) -> Optional[int]:
        return self.volume_thresholds.get(symbol, self.default_volume_threshold)

    @classmethod
    def from_text(cls, text: str) -> RuleSet:
        """Load ``key=value`` lines (``max_spread_bps``, ``volume_threshold.default``,
        ``volume_threshold.<SYMBOL>``); ``#`` starts a comment."""
        default = None
        per_symbol: dict[SymbolKey, int] = {}
        spread = None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not eq or not value.isdigit():
                raise ValueError(f"line {lineno}: expected key=<integer>")
            if key == "max_spread_bps":
                spread = int(value)
            elif key == "volume_threshold.default":
                default = int(value)
            elif key.startswith("volume_threshold."):
                per_symbol[SymbolKey.parse(key[len("volume_threshold."):])] = int(value)
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        return cls(default, per_symbol, spread)


def roll_day(state: SymbolDayState, new_trading_day: int) -> SymbolDayState:
    """Close out the day: last becomes prev_close, trade state resets, quotes survive."""
    if new_trading_day <= state.trading_day:
        raise ValueError("roll_day must move forward")
    return SymbolDayState(
        symbol=state.symbol,
        trading_day=new_trading_day,
        prev_close=state.last if state.last is not None else state.prev_close,
        best_bid=state.best_bid,
        best_ask=state.best_ask,
    )


def apply_tick(state: SymbolDayState, n: EventNotification) -> tuple[SymbolDayState, EventNotification]:
    if n.symbol != state.symbol:
        raise ValueError(f"tick for {n.symbol} applied to state of {state.symbol}")
    day = trading_day(n.source_ts_ms)
    if day > state.trading_day:
        state = roll_day(state, day)

    if n.event_type is EventType.TRADE:
        p = n.price
        state = replace(
            state,
            open=p if state.open is None else state.open,
            high=p if state.high is None or p > state.high else state.high,
            low=p if state.low is None or p < state.low else state.low,
            last=p,
            total_volume=state.total_volume + n.size,
            trade_count=state.trade_count + 1,
        )
    elif n.event_type is EventType.QUOTE:
        state = replace(state, best_bid=n.bid, best_ask=n.ask)
    return state, replace(n, enriched=state.block())


def detect_derived(
    before: SymbolDayState,
    after: SymbolDayState,
    n: EventNotification,
    rules: RuleSet,
) -> list[DerivedEvent]:
    if after.trading_day > before.trading_day:
        before = roll_day(before, after.trading_day)
    trigger = (n.source, n.seq)
    ts = n.source_ts_ms
    out = []
    if before.high is not None and after.high > before.high:
        out.append(DerivedEvent(DerivedKind.NEW_DAY_HIGH, n.symbol, trigger, (after.high,), ts))
    if before.low is not None and after.low < before.low:
        out.append(DerivedEvent(DerivedKind.NEW_DAY_LOW, n.symbol, trigger, (after.low,), ts))
    threshold = rules.threshold_for(n.symbol)
    if threshold is not None and before.total_volume < threshold <= after.total_volume:
        out.append(
            DerivedEvent(DerivedKind.VOLUME_THRESHOLD_CROSSED, n.symbol, trigger,
                         (after.total_volume, threshold), ts)
        )
    if n.event_type is EventType.QUOTE and rules.max_spread_bps is not None:
        # (ask - bid) / mid in bps, kept in integers: mid = (bid + ask) / 2
        if (n.ask - n.bid) * 20_000 > rules.max_spread_bps * (n.bid + n.ask):
            out.append(DerivedEvent(DerivedKind.QUOTE_SPREAD_ALERT, n.symbol, trigger, (n.bid, n.ask), ts))
    return out


class Enricher:
    """Holds the day state of every symbol and stamps notifications as they pass.

    Derived events are also turned into STATUS notifications on their own
    source with a private sequence counter.
    """

    def __init__(self, rules: RuleSet | None = None, derived_source: str = DERIVED_SOURCE):
        self.rules = rules or RuleSet()
        self.derived_source = derived_source
        self.states: dict[SymbolKey, SymbolDayState] = {}
        self.derived_seq = 0

    def process(self, n: EventNotification) -> tuple[EventNotification, list[DerivedEvent]]:
        before = self.states.get(n.symbol)
        if before is None:
            before = SymbolDayState(n.symbol, trading_day(n.source_ts_ms))
        after, enriched = apply_tick(before, n)
        self.states[n.symbol] = after
        return enriched, detect_derived(before, after, n, self.rules)

    def derived_notification(self, ev: DerivedEvent, ingest_ts_ms: int) -> EventNotification:
        self.derived_seq += 1
        state = self.states.get(ev.symbol)
        return EventNotification(
            source=self.derived_source,
            seq=self.derived_seq,
            symbol=ev.symbol,
            event_type=EventType.STATUS,
            instrument_class=None,
            source_ts_ms=ev.ts_ms,
            ingest_ts_ms=ingest_ts_ms,
            enriched=state.block() if state is not None else None,
        )
