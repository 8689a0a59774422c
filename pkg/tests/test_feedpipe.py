import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tickermesh.feedpipe import (
    FeedConfig,
    FeedFormat,
    FeedHandler,
    FeedReject,
    RawFeedEvent,
    RejectReason,
    encode_raw_frame,
    format_text_line,
    iter_binary_records,
    normalize,
    parse_binary_frame,
    parse_text_line,
    validate,
)
from tickermesh.model import EventType, InstrumentClass, SymbolKey, encode_fields
from tickermesh.synth import SyntheticFeed

NOW = 1716900000500
CFG = FeedConfig("f1", "SIM1")


def reason(fn, *args):
    with pytest.raises(FeedReject) as ei:
        fn(*args)
    return ei.value


class TestTextParse:
    def test_trade_line(self):
        raw = parse_text_line("SIM1|104|AAA.SIM|TRADE|98.25|500|||1716900000123")
        assert raw == RawFeedEvent("SIM1", 104, "AAA.SIM", EventType.TRADE, price=982_500, size=500,
                                   source_ts_ms=1716900000123)
        assert raw.origin_format is FeedFormat.TEXT

    def test_field_count(self):
        exc = reason(parse_text_line, "SIM1|104|AAA.SIM|TRADE|98.25")
        assert exc.reason is RejectReason.MALFORMED

    def test_quote_line(self):
        raw = parse_text_line("SIM1|105|AAA.SIM|QUOTE|||98.20|98.30|1716900000500")
        assert (raw.bid, raw.ask, raw.price, raw.size) == (982_000, 983_000, None, None)

    @pytest.mark.parametrize(
        "line,index",
        [
            ("sim1|1|AAA.SIM|TRADE|1|1|||1", 1),
            ("SIM1|x|AAA.SIM|TRADE|1|1|||1", 2),
            ("SIM1|1|AAA|TRADE|1|1|||1", 3),
            ("SIM1|1|AAA.SIM|TICK|1|1|||1", 4),
            ("SIM1|1|AAA.SIM|TRADE|1.23456|1|||1", 5),
            ("SIM1|1|AAA.SIM|TRADE|1|4294967296|||1", 6),
            ("SIM1|1|AAA.SIM|QUOTE|||x|1|1", 7),
            ("SIM1|1|AAA.SIM|TRADE|1|1|||", 9),
        ],
    )
    def test_first_bad_field_is_named(self, line, index):
        exc = reason(parse_text_line, line)
        assert exc.reason is RejectReason.MALFORMED
        assert f"field {index}" in exc.detail

    @given(st.text(max_size=60))
    def test_total(self, line):
        try:
            parse_text_line(line.replace("\n", ""))
        except FeedReject as exc:
            assert exc.reason is RejectReason.MALFORMED


class TestBinaryParse:
    def frame(self, **kw):
        raw = RawFeedEvent("SIM1", 104, "AAA.SIM", EventType.TRADE, price=982_500, size=500,
                           source_ts_ms=1716900000123, **kw)
        return raw, encode_raw_frame(raw)

    def test_equals_text_twin(self):
        raw, frame = self.frame()
        got, consumed = parse_binary_frame(frame)
        assert consumed == len(frame) == 4 + int.from_bytes(frame[2:4], "big")
        assert got == raw == parse_text_line(format_text_line(raw))
        assert got.origin_format is FeedFormat.BINARY

    def test_bad_magic(self):
        _, frame = self.frame()
        exc = reason(parse_binary_frame, b"\x00" + frame[1:])
        assert exc.reason is RejectReason.MALFORMED and "magic" in exc.detail

    def test_missing_symbol(self):
        body = encode_fields("SIM1", 1, "A.SIM", EventType.STATUS, None, None, None, None, 5)[4:]
        body = body.replace(b"\x03\x05A.SIM", b"")
        exc = reason(parse_binary_frame, b"\xfd\x01" + len(body).to_bytes(2, "big") + body)
        assert "tag 3 absent" in exc.detail

    def test_truncated(self):
        _, frame = self.frame()
        assert reason(parse_binary_frame, frame[:-2]).reason is RejectReason.MALFORMED

    def test_offset(self):
        raw, frame = self.frame()
        got, consumed = parse_binary_frame(b"junk" + frame, 4)
        assert got == raw and consumed == len(frame)

    @given(st.binary(max_size=120))
    def test_stream_walk_is_total(self, data):
        items = list(iter_binary_records(data))
        assert all(isinstance(i, (RawFeedEvent, FeedReject)) for i in items)
        assert len(items) <= len(data)

    def test_resync_after_junk(self):
        raw, frame = self.frame()
        items = list(iter_binary_records(b"\x01\x02\x03" + frame + b"\xfd\x01\x00\x03\x01\x05A" + frame))
        assert [type(i) for i in items] == [FeedReject, RawFeedEvent, FeedReject, RawFeedEvent]


class TestValidate:
    def raw(self, **kw):
        base = dict(source="SIM1", seq=10, symbol="AAA.SIM", event_type=EventType.TRADE, price=10_000, size=1,
                    source_ts_ms=NOW)
        base.update(kw)
        return RawFeedEvent(**base)

    def check(self, raw, cfg=CFG, last=None, now=NOW):
        try:
            validate(raw, cfg, dict(last or {}), now)
        except FeedReject as exc:
            return exc.reason
        return None

    def test_accepts_and_advances_seq(self):
        last = {}
        v = validate(self.raw(), CFG, last, NOW)
        assert v.symbol == SymbolKey.parse("AAA.SIM") and last == {"SIM1": 10}

    def test_zero_price(self):
        assert self.check(self.raw(price=0)) is RejectReason.NON_POSITIVE_PRICE

    def test_crossed_quote(self):
        q = self.raw(event_type=EventType.QUOTE, price=None, size=None, bid=990_000, ask=980_000)
        assert self.check(q) is RejectReason.CROSSED_QUOTE

    def test_duplicate_seq(self):
        last = {}
        validate(self.raw(seq=104), CFG, last, NOW)
        assert self.check(self.raw(seq=104), last=last) is RejectReason.DUPLICATE_OR_REGRESSED_SEQ
        assert self.check(self.raw(seq=103), last=last) is RejectReason.DUPLICATE_OR_REGRESSED_SEQ

    def test_timestamps(self):
        assert self.check(self.raw(source_ts_ms=NOW + 5_001)) is RejectReason.FUTURE_TIMESTAMP
        assert self.check(self.raw(source_ts_ms=NOW - 60_001)) is RejectReason.STALE_TIMESTAMP
        assert self.check(self.raw(source_ts_ms=NOW + 5_000)) is None

    def test_unknown_symbol_and_source(self):
        cfg = FeedConfig("f1", "SIM1", symbol_table=frozenset({SymbolKey.parse("BBB.SIM")}))
        assert self.check(self.raw(), cfg) is RejectReason.UNKNOWN_SYMBOL
        assert self.check(self.raw(source="OTHER"), cfg) is RejectReason.SOURCE_MISMATCH

    def test_field_presence(self):
        assert self.check(self.raw(size=None)) is RejectReason.MALFORMED
        assert self.check(self.raw(event_type=EventType.STATUS)) is RejectReason.MALFORMED

    def test_check_order(self):
        # every check fails at once: the first in the fixed order wins
        bad = self.raw(source="X", price=0, source_ts_ms=0, seq=1)
        assert self.check(bad, last={"X": 5}) is RejectReason.SOURCE_MISMATCH
        bad = self.raw(price=0, source_ts_ms=0, seq=1)
        assert self.check(bad, last={"SIM1": 5}) is RejectReason.NON_POSITIVE_PRICE
        crossed_stale = self.raw(event_type=EventType.QUOTE, price=None, size=None, bid=2, ask=1, source_ts_ms=0)
        assert self.check(crossed_stale) is RejectReason.CROSSED_QUOTE

    def test_skews_positive(self):
        with pytest.raises(ValueError):
            FeedConfig("f", "S", max_future_skew_ms=0)


class TestNormalize:
    def test_defaults_class_and_stamps_ingest(self):
        raw = parse_text_line("SIM1|104|aaa.SIM|TRADE|98.25|500|||1716900000123")
        n = normalize(validate(raw, CFG, {}, NOW), CFG, NOW + 7)
        assert n.instrument_class is InstrumentClass.EQUITY
        assert n.enriched is None and n.ingest_ts_ms == NOW + 7
        assert n.symbol.rendered == "AAA.SIM"

    def test_explicit_class_kept(self):
        raw = RawFeedEvent("SIM1", 1, "A.SIM", EventType.STATUS, source_ts_ms=NOW, instrument_class=InstrumentClass.FUND)
        assert normalize(validate(raw, CFG, {}, NOW), CFG, NOW).instrument_class is InstrumentClass.FUND

    @given(st.integers(0, 2**32))
    def test_text_and_binary_twins_normalize_equal(self, seed):
        feed = SyntheticFeed("SIM1", 8, seed)
        ht, hb = FeedHandler(CFG), FeedHandler(CFG)
        for k in range(20):
            raw = feed.next_event(NOW + k)
            a = ht.handle_line(format_text_line(raw), NOW + k)
            b = hb.handle_binary(encode_raw_frame(raw), NOW + k)
            assert [a] == b


class TestHandler:
    def test_conservation_and_monotone_seq(self):
        rng = random.Random(3)
        feed = SyntheticFeed("SIM1", 6, 11, bad_pct=30)
        h = FeedHandler(CFG)
        lines = [feed.next_line(NOW)[0] for _ in range(500)]
        lines += ["", "garbage", "SIM1|1|A.SIM|TRADE|1|1|||1"]
        rng.shuffle(lines)
        out = h.handle_text("\n".join(lines) + "\n", NOW)
        nonempty = sum(1 for l in lines if l)
        assert h.stats.parsed == nonempty == h.stats.accepted + h.stats.rejected_total
        assert h.stats.accepted == len(out)
        seqs = [n.seq for n in out]
        assert seqs == sorted(set(seqs))

    def test_binary_stream_counts(self):
        feed = SyntheticFeed("SIM1", 3, 2)
        frames = [encode_raw_frame(feed.next_event(NOW)) for _ in range(10)]
        h = FeedHandler(CFG)
        out = h.handle_binary(b"".join(frames[:5]) + b"\xfd\x01\x00\x02\x01\x09" + b"".join(frames[5:]), NOW)
        assert len(out) == 10
        assert h.stats.parsed == 11 and h.stats.rejected[RejectReason.MALFORMED] == 1
