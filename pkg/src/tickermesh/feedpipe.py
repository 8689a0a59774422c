"""Feed handlers: parse source formats, check and purge bad events, normalize survivors."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

from .model import (
    T_ASK,
    T_BID,
    T_CLASS,
    T_PRICE,
    T_SEQ,
    T_SIZE,
    T_SOURCE,
    T_SOURCE_TS,
    T_SYMBOL,
    T_TYPE,
    U32_MAX,
    U64_MAX,
    EventNotification,
    EventType,
    InstrumentClass,
    MalformedFrame,
    SymbolKey,
    decode_fields,
    encode_fields,
    format_decimal,
    parse_decimal,
)

log = logging.getLogger(__name__)

_SOURCE_RE = re.compile(r"[A-Z0-9]{1,8}")
_SYMBOL_RE = re.compile(r"[A-Za-z0-9]{1,12}\.[A-Za-z]{1,4}")
_UINT_RE = re.compile(r"\d+")


class FeedFormat(Enum):
    TEXT = "text"
    BINARY = "binary"


class RejectReason(Enum):
    MALFORMED = "MALFORMED"
    NON_POSITIVE_PRICE = "NON_POSITIVE_PRICE"
    CROSSED_QUOTE = "CROSSED_QUOTE"
    STALE_TIMESTAMP = "STALE_TIMESTAMP"
    FUTURE_TIMESTAMP = "FUTURE_TIMESTAMP"
    DUPLICATE_OR_REGRESSED_SEQ = "DUPLICATE_OR_REGRESSED_SEQ"
    UNKNOWN_SYMBOL = "UNKNOWN_SYMBOL"
    SOURCE_MISMATCH = "SOURCE_MISMATCH"


class FeedReject(Exception):
    """An input event was purged; ``reason`` is its single primary cause."""

    def __init__(self, reason: RejectReason, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)


@dataclass(frozen=True, slots=True)
class RawFeedEvent:
    """An event as parsed from the wire, not yet checked."""

    source: str
    seq: int
    symbol: str
    event_type: EventType
    price: Optional[int] = None
    size: Optional[int] = None
    bid: Optional[int] = None
    ask: Optional[int] = None
    source_ts_ms: int = 0
    instrument_class: Optional[InstrumentClass] = None
    origin_format: FeedFormat = field(default=FeedFormat.TEXT, compare=False)
    raw_offset: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class ValidatedEvent:
    raw: RawFeedEvent
    symbol: SymbolKey


@dataclass
class FeedConfig:
    feed_id: str
    expected_source: str
    default_instrument_class: InstrumentClass = InstrumentClass.EQUITY
    max_future_skew_ms: int = 5_000
    max_past_skew_ms: int = 60_000
    symbol_table: Optional[frozenset[SymbolKey]] = None

    def __post_init__(self) -> None:
        if self.max_future_skew_ms <= 0 or self.max_past_skew_ms <= 0:
            raise ValueError("skews must be positive")


# ---------------------------------------------------------------------------
# Parsing


def _malformed(index: int, what: str) -> FeedReject:
    return FeedReject(RejectReason.MALFORMED, f"field {index}: {what}")


def _opt_decimal(text: str, index: int) -> Optional[int]:
    if text == "":
        return None
    try:
        return parse_decimal(text)
    except ValueError:
        raise _malformed(index, f"bad decimal {text!r}") from None


def _uint(text: str, index: int, limit: int) -> int:
    if not _UINT_RE.fullmatch(text):
        raise _malformed(index, f"bad integer {text!r}")
    value = int(text)
    if value > limit:
        raise _malformed(index, f"{value} out of range")
    return value


def parse_text_line(line: str, offset: int = 0) -> RawFeedEvent:
    """Parse ``source|seq|symbol|type|price|size|bid|ask|ts_ms``.

    Raises FeedReject(MALFORMED) naming the 1-based index of the first bad field.
    """
    fields = line.split("|")
    if len(fields) != 9:
        raise FeedReject(RejectReason.MALFORMED, f"field count {len(fields)} != 9")
    source, seq, symbol, etype, price, size, bid, ask, ts = fields
    if not _SOURCE_RE.fullmatch(source):
        raise _malformed(1, f"bad source {source!r}")
    seq_v = _uint(seq, 2, U64_MAX)
    if not _SYMBOL_RE.fullmatch(symbol):
        raise _malformed(3, f"bad symbol {symbol!r}")
    try:
        et = EventType[etype]
    except KeyError:
        raise _malformed(4, f"bad event type {etype!r}") from None
    price_v = _opt_decimal(price, 5)
    size_v = None if size == "" else _uint(size, 6, U32_MAX)
    bid_v = _opt_decimal(bid, 7)
    ask_v = _opt_decimal(ask, 8)
    ts_v = _uint(ts, 9, U64_MAX)
    return RawFeedEvent(
        source, seq_v, symbol, et, price_v, size_v, bid_v, ask_v, ts_v,
        origin_format=FeedFormat.TEXT, raw_offset=offset,
    )


def parse_binary_frame(buf: bytes | memoryview, offset: int = 0) -> tuple[RawFeedEvent, int]:
    """Parse one TLV frame at ``offset``; returns the event and ``4 + payload length``."""
    try:
        fields, consumed = decode_fields(buf, offset)
    except MalformedFrame as exc:
        raise FeedReject(RejectReason.MALFORMED, exc.reason) from None
    for tag in (T_SOURCE, T_SEQ, T_SYMBOL, T_TYPE, T_SOURCE_TS):
        if tag not in fields:
            raise FeedReject(RejectReason.MALFORMED, f"tag {tag} absent")
    if not _SOURCE_RE.fullmatch(fields[T_SOURCE]):
        raise FeedReject(RejectReason.MALFORMED, f"tag {T_SOURCE} bad source")
    if not _SYMBOL_RE.fullmatch(fields[T_SYMBOL]):
        raise FeedReject(RejectReason.MALFORMED, f"tag {T_SYMBOL} bad symbol")
    for tag in (T_PRICE, T_BID, T_ASK):
        if fields.get(tag, 0) < 0:
            # the text grammar has no negative decimals; keep both formats equivalent
            raise FeedReject(RejectReason.MALFORMED, f"tag {tag} negative")
    raw = RawFeedEvent(
        source=fields[T_SOURCE],
        seq=fields[T_SEQ],
        symbol=fields[T_SYMBOL],
        event_type=fields[T_TYPE],
        price=fields.get(T_PRICE),
        size=fields.get(T_SIZE),
        bid=fields.get(T_BID),
        ask=fields.get(T_ASK),
        source_ts_ms=fields[T_SOURCE_TS],
        instrument_class=fields.get(T_CLASS),
        origin_format=FeedFormat.BINARY,
        raw_offset=offset,
    )
    return raw, consumed


def format_text_line(raw: RawFeedEvent) -> str:
    def dec(v: Optional[int]) -> str:
        return "" if v is None else format_decimal(v)

    size = "" if raw.size is None else str(raw.size)
    return "|".join(
        (raw.source, str(raw.seq), raw.symbol, raw.event_type.name, dec(raw.price), size,
         dec(raw.bid), dec(raw.ask), str(raw.source_ts_ms))
    )


def encode_raw_frame(raw: RawFeedEvent) -> bytes:
    return encode_fields(
        raw.source, raw.seq, raw.symbol, raw.event_type, raw.price, raw.size, raw.bid, raw.ask,
        raw.source_ts_ms, instrument_class=raw.instrument_class,
    )


# ---------------------------------------------------------------------------
# Checking and normalization


def validate(
    raw: RawFeedEvent,
    cfg: FeedConfig,
    last_seq_by_source: dict[str, int],
    now_ms: int,
) -> ValidatedEvent:
    """Run the purge checks in their fixed order; raise FeedReject on the first failure.

    On success ``last_seq_by_source`` is advanced to ``raw.seq``.
    """
    if raw.source != cfg.expected_source:
        raise FeedReject(RejectReason.SOURCE_MISMATCH, f"{raw.source} != {cfg.expected_source}")
    symbol = SymbolKey.parse(raw.symbol.upper())
    if cfg.symbol_table is not None and symbol not in cfg.symbol_table:
        raise FeedReject(RejectReason.UNKNOWN_SYMBOL, symbol.rendered)

    et = raw.event_type
    if et is EventType.TRADE:
        if raw.price is None or raw.size is None:
            raise FeedReject(RejectReason.MALFORMED, "TRADE without price or size")
    elif et is EventType.QUOTE:
        if raw.bid is None or raw.ask is None:
            raise FeedReject(RejectReason.MALFORMED, "QUOTE without bid or ask")
    elif not (raw.price is None and raw.size is None and raw.bid is None and raw.ask is None):
        raise FeedReject(RejectReason.MALFORMED, "STATUS with price fields")

    for name in ("price", "bid", "ask"):
        v = getattr(raw, name)
        if v is not None and v <= 0:
            raise FeedReject(RejectReason.NON_POSITIVE_PRICE, f"{name}={format_decimal(v)}")
    if raw.bid is not None and raw.ask is not None and raw.bid > raw.ask:
        raise FeedReject(
            RejectReason.CROSSED_QUOTE, f"bid {format_decimal(raw.bid)} > ask {format_decimal(raw.ask)}"
        )

    if raw.source_ts_ms > now_ms + cfg.max_future_skew_ms:
        raise FeedReject(RejectReason.FUTURE_TIMESTAMP, f"{raw.source_ts_ms} vs now {now_ms}")
    if raw.source_ts_ms < now_ms - cfg.max_past_skew_ms:
        raise FeedReject(RejectReason.STALE_TIMESTAMP, f"{raw.source_ts_ms} vs now {now_ms}")

    last = last_seq_by_source.get(raw.source, 0)
    if raw.seq <= last:
        raise FeedReject(RejectReason.DUPLICATE_OR_REGRESSED_SEQ, f"seq {raw.seq} <= {last}")
    last_seq_by_source[raw.source] = raw.seq
    return ValidatedEvent(raw, symbol)


def normalize(v: ValidatedEvent, cfg: FeedConfig, ingest_ts_ms: int) -> EventNotification:
    raw = v.raw
    return EventNotification(
        source=raw.source,
        seq=raw.seq,
        symbol=v.symbol,
        event_type=raw.event_type,
        instrument_class=raw.instrument_class or cfg.default_instrument_class,
        price=raw.price,
        size=raw.size,
        bid=raw.bid,
        ask=raw.ask,
        source_ts_ms=raw.source_ts_ms,
        ingest_ts_ms=ingest_ts_ms,
    )


# ---------------------------------------------------------------------------
# Stream handler


@dataclass
class FeedStats:
    parsed: int = 0
    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())


class FeedHandler:
    """One feed's ingress: single-threaded over its input, owns its sequence memory.

    ``parsed`` counts every input record (line or frame attempt), so
    ``parsed == accepted + rejected`` holds for any input.
    """

    def __init__(self, cfg: FeedConfig):
        self.cfg = cfg
        self.last_seq_by_source: dict[str, int] = {}
        self.stats = FeedStats()

    def _reject(self, exc: FeedReject, where: int) -> None:
        self.stats.rejected[exc.reason] += 1
        log.debug("feed %s purged record at %d: %s", self.cfg.feed_id, where, exc)

    def accept_raw(self, raw: RawFeedEvent, now_ms: int) -> Optional[EventNotification]:
        try:
            v = validate(raw, self.cfg, self.last_seq_by_source, now_ms)
        except FeedReject as exc:
            self._reject(exc, raw.raw_offset)
            return None
        self.stats.accepted += 1
        return normalize(v, self.cfg, now_ms)

    def handle_line(self, line: str, now_ms: int, offset: int = 0) -> Optional[EventNotification]:
        self.stats.parsed += 1
        try:
            raw = parse_text_line(line, offset)
        except FeedReject as exc:
            self._reject(exc, offset)
            return None
        return self.accept_raw(raw, now_ms)

    def handle_text(self, text: str, now_ms: int) -> list[EventNotification]:
        out = []
        offset = 0
        for line in text.split("\n"):
            if line:
                n = self.handle_line(line.rstrip("\r"), now_ms, offset)
                if n is not None:
                    out.append(n)
            offset += len(line) + 1
        return out

    def handle_binary(self, buf: bytes, now_ms: int) -> list[EventNotification]:
        out = []
        for item in iter_binary_records(buf):
            self.stats.parsed += 1
            if isinstance(item, FeedReject):
                self._reject(item, -1)
                continue
            n = self.accept_raw(item, now_ms)
            if n is not None:
                out.append(n)
        return out


def iter_binary_records(buf: bytes) -> Iterator[RawFeedEvent | FeedReject]:
    """Walk a concatenation of frames, yielding events or rejects; never raises.

    A bad header resynchronises on the next magic byte; a frame whose header
    is sound but whose body is bad is skipped by its declared length.
    """
    pos, end = 0, len(buf)
    while pos < end:
        try:
            raw, consumed = parse_binary_frame(buf, pos)
        except FeedReject as exc:
            yield exc
            if buf[pos] == 0xFD and end - pos >= 4 and buf[pos + 1] == 0x01:
                length = int.from_bytes(buf[pos + 2 : pos + 4], "big")
                if pos + 4 + length <= end:
                    pos += 4 + length
                    continue
                return
            nxt = buf.find(b"\xfd", pos + 1)
            if nxt < 0:
                return
            pos = nxt
            continue
        yield raw
        pos += consumed

