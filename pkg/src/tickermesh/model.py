"""Canonical market-data types, the subscription filter algebra and the TLV codec.

Prices are fixed-point integers in units of 1e-4 (``98.25`` is stored as
``982500``) so equality and codec round-trips are exact.
"""

from __future__ import annotations

import functools
import re
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional

PRICE_SCALE = 10_000

FRAME_MAGIC = 0xFD
FRAME_VERSION = 0x01
FRAME_HEADER = struct.Struct(">BBH")

_CODE_RE = re.compile(r"[A-Z0-9]{1,12}")
_MARKET_RE = re.compile(r"[A-Z]{1,4}")
_SOURCE_RE = re.compile(r"[A-Z0-9]{1,8}")
_DECIMAL_RE = re.compile(r"(\d+)(?:\.(\d{1,4}))?")

_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_U32 = struct.Struct(">I")
_U8 = struct.Struct(">B")

U64_MAX = (1 << 64) - 1
U32_MAX = (1 << 32) - 1


class MalformedFrame(ValueError):
    """A byte sequence is not a well-formed TLV frame."""

    def __init__(self, reason: str, offset: int | None = None):
        self.reason = reason
        self.offset = offset
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"malformed frame: {reason}{where}")


class EventType(IntEnum):
    TRADE = 1
    QUOTE = 2
    STATUS = 3


class InstrumentClass(IntEnum):
    EQUITY = 1
    FUND = 2
    INDEX = 3
    OTHER = 4


class QoI(IntEnum):
    """Delivery contract of a subscription."""

    CONFLATED = 1  # keep-latest per symbol, timeliness first
    COMPLETE = 2  # lossless, in order


def parse_decimal(text: str) -> int:
    """Parse a non-negative decimal with at most four fractional digits into 1e-4 units."""
    m = _DECIMAL_RE.fullmatch(text)
    if m is None:
        raise ValueError(f"bad decimal {text!r}")
    whole, frac = m.group(1), m.group(2) or ""
    return int(whole) * PRICE_SCALE + int(frac.ljust(4, "0") or 0)


def format_decimal(value: int) -> str:
    sign = "-" if value < 0 else ""
    whole, frac = divmod(abs(value), PRICE_SCALE)
    return f"{sign}{whole}.{frac:04d}"


@functools.total_ordering
@dataclass(frozen=True, eq=False, slots=True)
class SymbolKey:
    """A listing of one instrument on one market, rendered ``CODE.MARKET``.

    Ordering on ``(code, market)`` coincides with ordering on the rendered
    form because ``.`` sorts below every alphanumeric character. Equality,
    hashing and ordering all go through the rendered form, which keeps the
    dictionary lookups on the delivery path cheap.
    """

    code: str
    market: str
    rendered: str = field(init=False, repr=False, compare=False)
    _hash: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not _CODE_RE.fullmatch(self.code):
            raise ValueError(f"bad symbol code {self.code!r}")
        if not _MARKET_RE.fullmatch(self.market):
            raise ValueError(f"bad market {self.market!r}")
        rendered = f"{self.code}.{self.market}"
        object.__setattr__(self, "rendered", rendered)
        object.__setattr__(self, "_hash", hash(rendered))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if other.__class__ is not SymbolKey:
            return NotImplemented
        return self.rendered == other.rendered

    def __lt__(self, other) -> bool:
        if other.__class__ is not SymbolKey:
            return NotImplemented
        return self.rendered < other.rendered

    @classmethod
    def parse(cls, text: str) -> SymbolKey:
        code, dot, market = text.partition(".")
        if not dot:
            raise ValueError(f"symbol {text!r} lacks a market suffix")
        return cls(code, market)

    def __str__(self) -> str:
        return self.rendered


@dataclass(frozen=True, slots=True)
class EnrichmentBlock:
    """Day state appended to a notification.

    The OHLC fields stay ``None`` until the symbol's first trade of the day.
    """

    day_open: Optional[int]
    day_high: Optional[int]
    day_low: Optional[int]
    last: Optional[int]
    total_volume: int = 0
    trade_count: int = 0
    prev_close: Optional[int] = None


@dataclass(frozen=True, slots=True)
class EventNotification:
    source: str
    seq: int
    symbol: SymbolKey
    event_type: EventType
    instrument_class: Optional[InstrumentClass] = None
    price: Optional[int] = None
    size: Optional[int] = None
    bid: Optional[int] = None
    ask: Optional[int] = None
    source_ts_ms: int = 0
    ingest_ts_ms: int = 0
    enriched: Optional[EnrichmentBlock] = None

    def __post_init__(self) -> None:
        if self.seq <= 0:
            raise ValueError("seq must be positive")
        et = self.event_type
        if et is EventType.TRADE:
            if self.price is None or self.size is None:
                raise ValueError("TRADE requires price and size")
        elif et is EventType.QUOTE:
            if self.bid is None or self.ask is None:
                raise ValueError("QUOTE requires bid and ask")
        elif not (self.price is None and self.size is None and self.bid is None and self.ask is None):
            raise ValueError("STATUS carries no price, size, bid or ask")
        for v in (self.price, self.bid, self.ask):
            if v is not None and v <= 0:
                raise ValueError("prices must be strictly positive")
        if self.bid is not None and self.ask is not None and self.bid > self.ask:
            raise ValueError("crossed quote")

    @property
    def key(self) -> tuple[str, int]:
        return (self.source, self.seq)


# ---------------------------------------------------------------------------
# Filters


@dataclass(frozen=True, slots=True)
class SubscriptionFilter:
    """Conjunctive content filter; ``None`` fields are wildcards."""

    source: Optional[str] = None
    instrument_class: Optional[InstrumentClass] = None
    event_types: Optional[frozenset[EventType]] = None
    symbols: Optional[frozenset[SymbolKey]] = None
    prefix: Optional[str] = None

    def __post_init__(self) -> None:
        if self.symbols is not None and self.prefix is not None:
            raise ValueError("a filter carries a symbol set or a prefix, not both")
        if self.event_types is not None:
            if not self.event_types:
                raise ValueError("event_types must be non-empty when given")
            if not isinstance(self.event_types, frozenset):
                object.__setattr__(self, "event_types", frozenset(self.event_types))
        if self.symbols is not None:
            if not self.symbols:
                raise ValueError("symbols must be non-empty when given")
            if not isinstance(self.symbols, frozenset):
                object.__setattr__(self, "symbols", frozenset(self.symbols))
        if self.prefix is not None and not self.prefix:
            raise ValueError("prefix must be non-empty when given")

    @property
    def is_wildcard(self) -> bool:
        return (
            self.source is None
            and self.instrument_class is None
            and self.event_types is None
            and self.symbols is None
            and self.prefix is None
        )

    def canonical(self) -> bytes:
        return encode_filter(self)


WILDCARD = SubscriptionFilter()


@dataclass(frozen=True, slots=True)
class Subscription:
    id: int
    filter: SubscriptionFilter
    qoi: QoI = QoI.COMPLETE


def filter_matches(f: SubscriptionFilter, n: EventNotification) -> bool:
    if f.source is not None and f.source != n.source:
        return False
    if f.instrument_class is not None and f.instrument_class != n.instrument_class:
        return False
    if f.event_types is not None and n.event_type not in f.event_types:
        return False
    if f.symbols is not None:
        return n.symbol in f.symbols
    if f.prefix is not None:
        return n.symbol.rendered.startswith(f.prefix)
    return True


def filter_covers(a: SubscriptionFilter, b: SubscriptionFilter) -> bool:
    """Sound (not complete) test that every notification matching ``b`` matches ``a``."""
    if a.source is not None and a.source != b.source:
        return False
    if a.instrument_class is not None and a.instrument_class != b.instrument_class:
        return False
    if a.event_types is not None and (b.event_types is None or not b.event_types <= a.event_types):
        return False
    if a.symbols is not None:
        return b.symbols is not None and b.symbols <= a.symbols
    if a.prefix is not None:
        if b.prefix is not None:
            return b.prefix.startswith(a.prefix)
        if b.symbols is not None:
            return all(s.rendered.startswith(a.prefix) for s in b.symbols)
        return False
    return True


def merge_filters(fs: Iterable[SubscriptionFilter]) -> tuple[SubscriptionFilter, ...]:
    """Drop every filter covered by another one; result is in canonical byte order."""
    ordered = sorted(set(fs), key=encode_filter)
    rank = {f: i for i, f in enumerate(ordered)}
    buckets: dict[tuple, _CoverBucket] = {}
    for g in ordered:
        buckets.setdefault((g.source, g.instrument_class), _CoverBucket()).add(g)
    kept = []
    for f in ordered:
        covered = False
        for g in _cover_candidates(f, buckets):
            if g is f or not filter_covers(g, f):
                continue
            # mutual cover: keep the canonically smaller one
            if filter_covers(f, g) and rank[f] < rank[g]:
                continue
            covered = True
            break
        if not covered:
            kept.append(f)
    return tuple(kept)


def merge_added(merged: tuple[SubscriptionFilter, ...], f: SubscriptionFilter) -> tuple[SubscriptionFilter, ...]:
    """``merge_filters(merged + (f,))`` for an already merged set, in one pass.

    Covering is transitive, so nothing dropped earlier can come back.
    """
    if any(filter_covers(g, f) for g in merged):
        return merged
    return tuple(sorted([g for g in merged if not filter_covers(f, g)] + [f], key=encode_filter))


class _CoverBucket:
    """Filters sharing (source, class), indexed by what a covered filter must contain."""

    __slots__ = ("open", "by_symbol", "by_prefix", "prefix_lens")

    def __init__(self):
        self.open: list[SubscriptionFilter] = []
        self.by_symbol: dict[SymbolKey, list[SubscriptionFilter]] = {}
        self.by_prefix: dict[str, list[SubscriptionFilter]] = {}
        self.prefix_lens: set[int] = set()

    def add(self, g: SubscriptionFilter) -> None:
        if g.symbols is not None:
            for s in g.symbols:
                self.by_symbol.setdefault(s, []).append(g)
        elif g.prefix is not None:
            self.by_prefix.setdefault(g.prefix, []).append(g)
            self.prefix_lens.add(len(g.prefix))
        else:
            self.open.append(g)


def _cover_candidates(f: SubscriptionFilter, buckets: dict[tuple, _CoverBucket]):
    """Every filter that might cover ``f``; a superset of the true coverers."""
    sources = {None, f.source}
    classes = {None, f.instrument_class}
    if f.symbols is not None:
        probe = next(iter(f.symbols))  # any one will do: a covering set holds them all
        text = probe.rendered
    elif f.prefix is not None:
        probe, text = None, f.prefix
    else:
        probe = text = None
    for src in sources:
        for cls in classes:
            b = buckets.get((src, cls))
            if b is None:
                continue
            yield from b.open
            if probe is not None:
                yield from b.by_symbol.get(probe, ())
            if text is not None:
                for n in b.prefix_lens:
                    if n <= len(text):
                        yield from b.by_prefix.get(text[:n], ())


# ---------------------------------------------------------------------------
# TLV primitives


def _tlv(tag: int, value: bytes) -> bytes:
    if len(value) > 255:
        raise ValueError(f"tag {tag} value too long ({len(value)} bytes)")
    return bytes((tag, len(value))) + value


def iter_tlv(buf: bytes | memoryview, start: int, end: int):
    """Yield ``(tag, value, offset)`` for the TLV entries in ``buf[start:end]``."""
    pos = start
    while pos < end:
        if pos + 2 > end:
            raise MalformedFrame("truncated TLV header", pos)
        tag = buf[pos]
        length = buf[pos + 1]
        if pos + 2 + length > end:
            raise MalformedFrame(f"tag {tag} value truncated", pos)
        yield tag, bytes(buf[pos + 2 : pos + 2 + length]), pos
        pos += 2 + length


def frame(payload: bytes) -> bytes:
    if len(payload) > 0xFFFF:
        raise ValueError("payload exceeds 65535 bytes")
    return FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, len(payload)) + payload


def read_frame_payload(buf: bytes | memoryview, offset: int = 0) -> tuple[int, int]:
    """Check the frame header at ``offset``; return ``(payload_start, payload_end)``."""
    if len(buf) - offset < FRAME_HEADER.size:
        raise MalformedFrame("truncated header", offset)
    magic, version, length = FRAME_HEADER.unpack_from(buf, offset)
    if magic != FRAME_MAGIC:
        raise MalformedFrame("magic", offset)
    if version != FRAME_VERSION:
        raise MalformedFrame("version", offset + 1)
    start = offset + FRAME_HEADER.size
    if start + length > len(buf):
        raise MalformedFrame("truncated payload", start)
    return start, start + length


def _ascii(value: bytes, tag: int, offset: int) -> str:
    try:
        return value.decode("ascii")
    except UnicodeDecodeError:
        raise MalformedFrame(f"tag {tag} is not ascii", offset) from None


def _fixed(value: bytes, fmt: struct.Struct, tag: int, offset: int) -> int:
    if len(value) != fmt.size:
        raise MalformedFrame(f"tag {tag} length {len(value)} != {fmt.size}", offset)
    return fmt.unpack(value)[0]


# Notification tags
T_SOURCE, T_SEQ, T_SYMBOL, T_TYPE, T_PRICE, T_SIZE, T_BID, T_ASK = 1, 2, 3, 4, 5, 6, 7, 8
T_SOURCE_TS, T_INGEST_TS, T_CLASS, T_ENRICHED = 9, 10, 11, 12

_ENRICH_PRICE_TAGS = {1: "day_open", 2: "day_high", 3: "day_low", 4: "last", 7: "prev_close"}
_ENRICH_COUNT_TAGS = {5: "total_volume", 6: "trade_count"}


def _encode_enrichment(e: EnrichmentBlock) -> bytes:
    parts = []
    for tag, name in ((1, "day_open"), (2, "day_high"), (3, "day_low"), (4, "last")):
        v = getattr(e, name)
        if v is not None:
            parts.append(_tlv(tag, _I64.pack(v)))
    parts.append(_tlv(5, _U64.pack(e.total_volume)))
    parts.append(_tlv(6, _U64.pack(e.trade_count)))
    if e.prev_close is not None:
        parts.append(_tlv(7, _I64.pack(e.prev_close)))
    return b"".join(parts)


def _decode_enrichment(value: bytes, base: int) -> EnrichmentBlock:
    fields: dict[str, int] = {}
    for tag, v, off in iter_tlv(value, 0, len(value)):
        if tag in _ENRICH_PRICE_TAGS:
            fields[_ENRICH_PRICE_TAGS[tag]] = _fixed(v, _I64, tag, base + off)
        elif tag in _ENRICH_COUNT_TAGS:
            fields[_ENRICH_COUNT_TAGS[tag]] = _fixed(v, _U64, tag, base + off)
    return EnrichmentBlock(
        day_open=fields.get("day_open"),
        day_high=fields.get("day_high"),
        day_low=fields.get("day_low"),
        last=fields.get("last"),
        total_volume=fields.get("total_volume", 0),
        trade_count=fields.get("trade_count", 0),
        prev_close=fields.get("prev_close"),
    )


def encode_fields(
    source: str,
    seq: int,
    symbol: str,
    event_type: int,
    price: Optional[int],
    size: Optional[int],
    bid: Optional[int],
    ask: Optional[int],
    source_ts_ms: int,
    ingest_ts_ms: Optional[int] = None,
    instrument_class: Optional[int] = None,
    enriched: Optional[EnrichmentBlock] = None,
) -> bytes:
    """Build a notification frame from loose fields (shared with raw feed emission)."""
    parts = [
        _tlv(T_SOURCE, source.encode("ascii")),
        _tlv(T_SEQ, _U64.pack(seq)),
        _tlv(T_SYMBOL, symbol.encode("ascii")),
        _tlv(T_TYPE, bytes((int(event_type),))),
    ]
    if price is not None:
        parts.append(_tlv(T_PRICE, _I64.pack(price)))
    if size is not None:
        parts.append(_tlv(T_SIZE, _U32.pack(size)))
    if bid is not None:
        parts.append(_tlv(T_BID, _I64.pack(bid)))
    if ask is not None:
        parts.append(_tlv(T_ASK, _I64.pack(ask)))
    parts.append(_tlv(T_SOURCE_TS, _U64.pack(source_ts_ms)))
    if ingest_ts_ms is not None:
        parts.append(_tlv(T_INGEST_TS, _U64.pack(ingest_ts_ms)))
    if instrument_class is not None:
        parts.append(_tlv(T_CLASS, bytes((int(instrument_class),))))
    if enriched is not None:
        parts.append(_tlv(T_ENRICHED, _encode_enrichment(enriched)))
    return frame(b"".join(parts))


def encode_notification(n: EventNotification) -> bytes:
    return encode_fields(
        n.source,
        n.seq,
        n.symbol.rendered,
        n.event_type,
        n.price,
        n.size,
        n.bid,
        n.ask,
        n.source_ts_ms,
        n.ingest_ts_ms,
        n.instrument_class,
        n.enriched,
    )


def decode_fields(buf: bytes | memoryview, offset: int = 0) -> tuple[dict, int]:
    """Decode one frame into a tag-keyed dict of typed values.

    Returns ``(fields, bytes_consumed)``. Unknown tags are dropped; repeated
    known tags are rejected.
    """
    start, end = read_frame_payload(buf, offset)
    out: dict = {}
    for tag, value, off in iter_tlv(buf, start, end):
        if tag in out:
            raise MalformedFrame(f"tag {tag} repeated", off)
        if tag in (T_SOURCE, T_SYMBOL):
            out[tag] = _ascii(value, tag, off)
        elif tag in (T_SEQ, T_SOURCE_TS, T_INGEST_TS):
            out[tag] = _fixed(value, _U64, tag, off)
        elif tag in (T_PRICE, T_BID, T_ASK):
            out[tag] = _fixed(value, _I64, tag, off)
        elif tag == T_SIZE:
            out[tag] = _fixed(value, _U32, tag, off)
        elif tag == T_TYPE:
            code = _fixed(value, _U8, tag, off)
            if code not in (1, 2, 3):
                raise MalformedFrame(f"tag {tag} event type {code}", off)
            out[tag] = EventType(code)
        elif tag == T_CLASS:
            code = _fixed(value, _U8, tag, off)
            if code not in (1, 2, 3, 4):
                raise MalformedFrame(f"tag {tag} instrument class {code}", off)
            out[tag] = InstrumentClass(code)
        elif tag == T_ENRICHED:
            out[tag] = _decode_enrichment(value, off + 2)
    return out, end - offset


_MANDATORY = (T_SOURCE, T_SEQ, T_SYMBOL, T_TYPE, T_SOURCE_TS, T_INGEST_TS)


def decode_notification(buf: bytes | memoryview, offset: int = 0) -> EventNotification:
    n, _ = decode_notification_at(buf, offset)
    return n


def decode_notification_at(buf: bytes | memoryview, offset: int = 0) -> tuple[EventNotification, int]:
    fields, consumed = decode_fields(buf, offset)
    for tag in _MANDATORY:
        if tag not in fields:
            raise MalformedFrame(f"tag {tag} absent", offset)
    try:
        n = EventNotification(
            source=fields[T_SOURCE],
            seq=fields[T_SEQ],
            symbol=SymbolKey.parse(fields[T_SYMBOL]),
            event_type=fields[T_TYPE],
            instrument_class=fields.get(T_CLASS),
            price=fields.get(T_PRICE),
            size=fields.get(T_SIZE),
            bid=fields.get(T_BID),
            ask=fields.get(T_ASK),
            source_ts_ms=fields[T_SOURCE_TS],
            ingest_ts_ms=fields[T_INGEST_TS],
            enriched=fields.get(T_ENRICHED),
        )
    except ValueError as exc:
        raise MalformedFrame(str(exc), offset) from None
    return n, consumed


# ---------------------------------------------------------------------------
# Canonical filter encoding: 1=source 2=class 3=event-type bitmask 4=symbol (repeated, sorted) 5=prefix


@functools.lru_cache(maxsize=1 << 16)
def encode_filter(f: SubscriptionFilter) -> bytes:
    parts = []
    if f.source is not None:
        parts.append(_tlv(1, f.source.encode("ascii")))
    if f.instrument_class is not None:
        parts.append(_tlv(2, bytes((int(f.instrument_class),))))
    if f.event_types is not None:
        mask = 0
        for et in f.event_types:
            mask |= 1 << (int(et) - 1)
        parts.append(_tlv(3, bytes((mask,))))
    if f.symbols is not None:
        for text in sorted(s.rendered for s in f.symbols):
            parts.append(_tlv(4, text.encode("ascii")))
    if f.prefix is not None:
        parts.append(_tlv(5, f.prefix.encode("ascii")))
    return b"".join(parts)


def decode_filter(buf: bytes) -> SubscriptionFilter:
    kw: dict = {}
    symbols = []
    for tag, value, off in iter_tlv(buf, 0, len(buf)):
        if tag == 1:
            kw["source"] = _ascii(value, tag, off)
        elif tag == 2:
            code = _fixed(value, _U8, tag, off)
            if code not in (1, 2, 3, 4):
                raise MalformedFrame(f"tag {tag} instrument class {code}", off)
            kw["instrument_class"] = InstrumentClass(code)
        elif tag == 3:
            mask = _fixed(value, _U8, tag, off)
            kw["event_types"] = frozenset(et for et in EventType if mask & (1 << (int(et) - 1)))
        elif tag == 4:
            symbols.append(SymbolKey.parse(_ascii(value, tag, off)))
        elif tag == 5:
            kw["prefix"] = _ascii(value, tag, off)
    if symbols:
        kw["symbols"] = frozenset(symbols)
    try:
        return SubscriptionFilter(**kw)
    except ValueError as exc:
        raise MalformedFrame(str(exc)) from None


# ---------------------------------------------------------------------------
# Filter expressions: ``source=XETRA type=TRADE,QUOTE symbol=AAA.SIM,BBB.SIM``


class FilterSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


_FILTER_KEYS = ("source", "class", "type", "symbol", "prefix")


def parse_filter_expr(text: str) -> SubscriptionFilter:
    """Parse space-separated ``key=value`` pairs; an empty expression is the wildcard."""
    kw: dict = {}
    for m in re.finditer(r"\S+", text):
        token, pos = m.group(0), m.start()
        key, eq, value = token.partition("=")
        if not eq or not value:
            raise FilterSyntaxError(f"expected key=value, got {token!r}", pos)
        if key not in _FILTER_KEYS:
            raise FilterSyntaxError(f"unknown filter key {key!r}", pos)
        vpos = pos + len(key) + 1
        try:
            if key == "source":
                if not _SOURCE_RE.fullmatch(value):
                    raise ValueError(f"bad source {value!r}")
                kw["source"] = value
            elif key == "class":
                kw["instrument_class"] = InstrumentClass[value]
            elif key == "type":
                kw["event_types"] = frozenset(EventType[v] for v in value.split(","))
            elif key == "symbol":
                kw["symbols"] = frozenset(SymbolKey.parse(v) for v in value.split(","))
            else:
                kw["prefix"] = value
        except (KeyError, ValueError) as exc:
            raise FilterSyntaxError(f"bad value for {key}: {exc}", vpos) from None
    try:
        return SubscriptionFilter(**kw)
    except ValueError as exc:
        raise FilterSyntaxError(str(exc), 0) from None


def format_filter_expr(f: SubscriptionFilter) -> str:
    parts = []
    if f.source is not None:
        parts.append(f"source={f.source}")
    if f.instrument_class is not None:
        parts.append(f"class={f.instrument_class.name}")
    if f.event_types is not None:
        parts.append("type=" + ",".join(et.name for et in sorted(f.event_types)))
    if f.symbols is not None:
        parts.append("symbol=" + ",".join(s.rendered for s in sorted(f.symbols)))
    if f.prefix is not None:
        parts.append(f"prefix={f.prefix}")
    return " ".join(parts)
