import pickle
import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import (
    UNIVERSE,
    filter_strategy,
    match_set,
    random_filter,
    random_notification,
    universe_notification,
)
from tickermesh.model import (
    WILDCARD,
    EnrichmentBlock,
    EventNotification,
    EventType,
    FilterSyntaxError,
    InstrumentClass,
    MalformedFrame,
    SubscriptionFilter,
    SymbolKey,
    decode_filter,
    decode_notification,
    encode_filter,
    encode_notification,
    filter_covers,
    filter_matches,
    format_decimal,
    format_filter_expr,
    iter_tlv,
    merge_added,
    merge_filters,
    parse_decimal,
    parse_filter_expr,
)


def sym(text):
    return SymbolKey.parse(text)


def trade(source="XETRA", symbol="AAA.SIM", seq=1, **kw):
    return EventNotification(source, seq, sym(symbol), EventType.TRADE, price=980_000, size=500, **kw)


def quote(source="XETRA", symbol="AAA.SIM", seq=1):
    return EventNotification(source, seq, sym(symbol), EventType.QUOTE, bid=982_000, ask=983_000)


# -- values ----------------------------------------------------------------------


class TestSymbolKey:
    def test_parse_round_trip(self):
        k = sym("AAA.SIM")
        assert (k.code, k.market, str(k)) == ("AAA", "SIM", "AAA.SIM")
        assert SymbolKey.parse(str(k)) == k

    @pytest.mark.parametrize("text", ["AAA", "aaa.SIM", "AAA.sim", "AAA.SIMXY", "A" * 13 + ".SIM", ".SIM", "AAA."])
    def test_rejects_bad_forms(self, text):
        with pytest.raises(ValueError):
            SymbolKey.parse(text)

    def test_ordering_follows_rendered_form(self):
        keys = [sym(s) for s in ("AB.SIM", "A.XET", "A.SIM", "A1.SIM", "B.A")]
        assert [str(k) for k in sorted(keys)] == sorted(str(k) for k in keys)

    def test_hash_eq_and_pickle(self):
        a, b = sym("AAA.SIM"), SymbolKey("AAA", "SIM")
        assert a == b and hash(a) == hash(b) and a is not b
        assert a != sym("AAA.XET")
        assert pickle.loads(pickle.dumps(a)) == a
        assert a != "AAA.SIM"


class TestDecimal:
    @pytest.mark.parametrize(
        "text,value",
        [("98.25", 982_500), ("98", 980_000), ("0.0001", 1), ("100.1000", 1_001_000), ("0", 0)],
    )
    def test_parse(self, text, value):
        assert parse_decimal(text) == value

    @pytest.mark.parametrize("text", ["", "1.23456", "-1", "1.", ".5", "1e3", " 1"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            parse_decimal(text)

    @given(st.integers(0, 10**15))
    def test_format_round_trip(self, v):
        assert parse_decimal(format_decimal(v)) == v


class TestNotificationInvariants:
    def test_trade_requires_price_and_size(self):
        with pytest.raises(ValueError):
            EventNotification("S", 1, sym("A.SIM"), EventType.TRADE, price=1)

    def test_quote_requires_both_sides(self):
        with pytest.raises(ValueError):
            EventNotification("S", 1, sym("A.SIM"), EventType.QUOTE, bid=1)

    def test_status_carries_no_prices(self):
        with pytest.raises(ValueError):
            EventNotification("S", 1, sym("A.SIM"), EventType.STATUS, price=1)

    @pytest.mark.parametrize("kw", [dict(bid=2, ask=1), dict(bid=0, ask=1)])
    def test_crossed_or_nonpositive_quote(self, kw):
        with pytest.raises(ValueError):
            EventNotification("S", 1, sym("A.SIM"), EventType.QUOTE, **kw)

    def test_seq_positive(self):
        with pytest.raises(ValueError):
            EventNotification("S", 0, sym("A.SIM"), EventType.STATUS)


# -- matching -------------------------------------------------------------------------


class TestMatches:
    def test_single_field(self):
        assert filter_matches(SubscriptionFilter(source="XETRA"), trade())

    def test_disjoint_symbol(self):
        assert not filter_matches(SubscriptionFilter(symbols=frozenset({sym("AAA.SIM")})), trade(symbol="BBB.SIM"))

    def test_conjunction_fails_one_conjunct(self):
        f = SubscriptionFilter(source="XETRA", event_types=frozenset({EventType.TRADE}))
        assert not filter_matches(f, quote())

    def test_prefix_is_on_rendered_form(self):
        assert filter_matches(SubscriptionFilter(prefix="AAA.S"), trade())
        assert not filter_matches(SubscriptionFilter(prefix="AAA.X"), trade())

    def test_class_absent_on_notification(self):
        assert not filter_matches(SubscriptionFilter(instrument_class=InstrumentClass.EQUITY), trade())

    def test_wildcard_matches_everything(self):
        assert all(filter_matches(WILDCARD, universe_notification(p)) for p in UNIVERSE[::7])

    @given(filter_strategy(), st.sampled_from(UNIVERSE))
    def test_agrees_with_oracle(self, f, point):
        assert filter_matches(f, universe_notification(point)) == (point in match_set(f))

    def test_filter_construction_rules(self):
        with pytest.raises(ValueError):
            SubscriptionFilter(symbols=frozenset({sym("A.SIM")}), prefix="A")
        with pytest.raises(ValueError):
            SubscriptionFilter(event_types=frozenset())
        with pytest.raises(ValueError):
            SubscriptionFilter(prefix="")


# -- covering and merging -------------------------------------------------------------------


class TestCovers:
    def test_reflexive(self):
        f = SubscriptionFilter(source="XETRA", prefix="AA")
        assert filter_covers(f, f)

    def test_source_covers_narrower(self):
        a = SubscriptionFilter(source="XETRA")
        b = SubscriptionFilter(source="XETRA", symbols=frozenset({sym("AAA.SIM")}))
        assert filter_covers(a, b)
        # frozen by enumerating the bounded universe
        assert match_set(b) <= match_set(a)
        assert not filter_covers(b, a)

    def test_disjoint_symbols(self):
        a = SubscriptionFilter(symbols=frozenset({sym("AAA.SIM")}))
        b = SubscriptionFilter(symbols=frozenset({sym("BBB.SIM")}))
        assert not filter_covers(a, b)

    def test_prefix_covers_longer_prefix_and_symbol_sets(self):
        a = SubscriptionFilter(prefix="AA")
        assert filter_covers(a, SubscriptionFilter(prefix="AA1"))
        assert filter_covers(a, SubscriptionFilter(symbols=frozenset({sym("AA1.SIM"), sym("AA2.XET")})))
        assert not filter_covers(a, SubscriptionFilter(symbols=frozenset({sym("AA1.SIM"), sym("B1.SIM")})))
        assert not filter_covers(a, SubscriptionFilter(prefix="A"))

    @given(filter_strategy(), filter_strategy())
    def test_sound(self, a, b):
        if filter_covers(a, b):
            assert match_set(b) <= match_set(a)

    @given(filter_strategy(), filter_strategy(), filter_strategy())
    def test_transitive(self, a, b, c):
        if filter_covers(a, b) and filter_covers(b, c):
            assert filter_covers(a, c)


class TestMerge:
    def test_singleton(self):
        f = SubscriptionFilter(source="A")
        assert merge_filters([f]) == (f,)

    def test_wildcard_absorbs(self):
        fs = [SubscriptionFilter(source="A"), WILDCARD, SubscriptionFilter(prefix="X")]
        assert merge_filters(fs) == (WILDCARD,)

    def test_drops_covered(self):
        a, b = SubscriptionFilter(source="A"), SubscriptionFilter(source="B")
        at = SubscriptionFilter(source="A", event_types=frozenset({EventType.TRADE}))
        assert set(merge_filters([a, at, b])) == {a, b}
        # frozen by enumerating the bounded universe
        assert match_set(a) | match_set(b) == match_set(a) | match_set(at) | match_set(b)

    def test_empty(self):
        assert merge_filters([]) == ()

    def test_output_in_canonical_order(self):
        fs = [random_filter(random.Random(i)) for i in range(30)]
        out = merge_filters(fs)
        assert list(out) == sorted(out, key=encode_filter)

    @given(st.lists(filter_strategy(), max_size=8))
    def test_preserves_union_and_is_cover_free(self, fs):
        out = merge_filters(fs)
        assert set(out) <= set(fs)
        before = frozenset().union(*map(match_set, fs)) if fs else frozenset()
        after = frozenset().union(*map(match_set, out)) if out else frozenset()
        assert before == after
        for x in out:
            assert not any(y != x and filter_covers(y, x) for y in out)

    @given(st.lists(filter_strategy(), max_size=8), st.randoms())
    def test_order_independent(self, fs, rnd):
        shuffled = list(fs)
        rnd.shuffle(shuffled)
        assert merge_filters(fs) == merge_filters(shuffled)

    @given(st.lists(filter_strategy(), max_size=8), filter_strategy())
    def test_incremental_equals_full(self, fs, f):
        assert merge_added(merge_filters(fs), f) == merge_filters(fs + [f])


# -- codec ----------------------------------------------------------------------------


def _tags(frame: bytes) -> list[int]:
    return [tag for tag, _, _ in iter_tlv(frame, 4, len(frame))]


class TestCodec:
    def test_full_trade_round_trip(self):
        n = EventNotification(
            "XETRA", 104, sym("AAA.SIM"), EventType.TRADE, InstrumentClass.EQUITY, price=982_500, size=500,
            source_ts_ms=1716900000123, ingest_ts_ms=1716900000130,
            enriched=EnrichmentBlock(980_000, 990_000, 970_000, 982_500, 1500, 3, 975_000),
        )
        assert decode_notification(encode_notification(n)) == n

    def test_minimal_frame_has_only_mandatory_tags(self):
        n = EventNotification("S", 1, sym("A.SIM"), EventType.STATUS, source_ts_ms=5, ingest_ts_ms=6)
        frame = encode_notification(n)
        assert frame[:2] == b"\xfd\x01"
        assert struct.unpack(">H", frame[2:4])[0] == len(frame) - 4
        assert _tags(frame) == [1, 2, 3, 4, 9, 10]

    def test_frozen_bytes(self):
        n = EventNotification("S", 2, sym("A.SIM"), EventType.TRADE, price=10_000, size=7, source_ts_ms=3, ingest_ts_ms=4)
        expected = bytes.fromhex(
            "fd01003b"
            "010153"
            "02080000000000000002"
            "030541" + "2e53494d"
            "040101"
            "05080000000000002710"
            "060400000007"
            "09080000000000000003"
            "0a080000000000000004"
        )
        assert encode_notification(n) == expected

    def test_truncated(self):
        frame = encode_notification(trade())
        for cut in (1, 3, 4, len(frame) - 1):
            with pytest.raises(MalformedFrame):
                decode_notification(frame[:cut])

    def test_bad_magic_and_missing_tag(self):
        frame = bytearray(encode_notification(trade()))
        frame[0] = 0
        with pytest.raises(MalformedFrame, match="magic"):
            decode_notification(bytes(frame))
        n = EventNotification("S", 1, sym("A.SIM"), EventType.STATUS)
        body = encode_notification(n)[4:]
        # drop the symbol entry (tag 3)
        pos = body.index(b"\x03\x05A.SIM")
        body = body[:pos] + body[pos + 7 :]
        with pytest.raises(MalformedFrame, match="tag 3"):
            decode_notification(b"\xfd\x01" + struct.pack(">H", len(body)) + body)

    def test_unknown_tags_are_skipped(self):
        n = trade()
        frame = encode_notification(n)
        body = frame[4:] + b"\x63\x02zz"
        assert decode_notification(b"\xfd\x01" + struct.pack(">H", len(body)) + body) == n

    @given(st.randoms(use_true_random=False))
    def test_round_trip_property(self, rnd):
        n = random_notification(rnd)
        assert decode_notification(encode_notification(n)) == n

    def test_injective(self):
        rng = random.Random(5)
        notes = {random_notification(rng) for _ in range(3000)}
        assert len({encode_notification(n) for n in notes}) == len(notes)

    @given(st.binary(max_size=80))
    def test_decode_never_crashes(self, data):
        try:
            decode_notification(data)
        except MalformedFrame:
            pass


class TestFilterCodecAndExpressions:
    @given(filter_strategy())
    def test_filter_bytes_round_trip(self, f):
        assert decode_filter(encode_filter(f)) == f

    @given(filter_strategy())
    def test_expression_round_trip(self, f):
        assert parse_filter_expr(format_filter_expr(f)) == f

    def test_parse_expression(self):
        f = parse_filter_expr("source=XETRA type=TRADE,QUOTE symbol=AAA.SIM,BBB.SIM")
        assert f == SubscriptionFilter(
            source="XETRA",
            event_types=frozenset({EventType.TRADE, EventType.QUOTE}),
            symbols=frozenset({sym("AAA.SIM"), sym("BBB.SIM")}),
        )
        assert parse_filter_expr("") == WILDCARD

    @pytest.mark.parametrize(
        "text,pos",
        [("source=XETRA bogus", 13), ("colour=red", 0), ("type=TRADE,FOO", 5), ("symbol=AAA", 7),
         ("source=lower", 7), ("symbol=A.SIM prefix=A", 0)],
    )
    def test_syntax_errors_carry_position(self, text, pos):
        with pytest.raises(FilterSyntaxError) as ei:
            parse_filter_expr(text)
        assert ei.value.position == pos
        assert f"at position {pos}" in str(ei.value)
