import random

import pytest

from oracles import random_filter
from tickermesh.model import EventNotification, EventType, SubscriptionFilter, SymbolKey, filter_matches
from tickermesh.store import DuplicateKey, EventStore, OffsetRange, StorageFull

SYMS = [SymbolKey.parse(s) for s in ("AA1.SIM", "AA2.SIM", "AB1.XET", "B1.SIM", "C.XET")]
ALL = SubscriptionFilter()


def notes(count, seed=0, sources=("A", "B")):
    rng = random.Random(seed)
    seqs = {s: 0 for s in sources}
    out = []
    for _ in range(count):
        src = rng.choice(sources)
        seqs[src] += 1
        sym = rng.choice(SYMS)
        if rng.random() < 0.5:
            out.append(EventNotification(src, seqs[src], sym, EventType.TRADE, price=rng.randint(1, 10**6), size=3))
        else:
            out.append(EventNotification(src, seqs[src], sym, EventType.QUOTE, bid=5, ask=6))
    return out


def filled(items, **kw):
    st = EventStore(**kw)
    for n in items:
        st.append(n)
    return st


class TestAppend:
    def test_offsets(self):
        st = EventStore()
        offs = [st.append(n) for n in notes(20)]
        assert offs == list(range(20)) and st.end == 20

    def test_duplicate(self):
        st = EventStore()
        n = notes(1)[0]
        st.append(n)
        with pytest.raises(DuplicateKey):
            st.append(n)
        assert st.end == 1

    def test_storage_full(self):
        items = notes(5)
        st = EventStore(capacity_bytes=120)
        with pytest.raises(StorageFull):
            for n in items:
                st.append(n)
        assert 0 < st.end < 5


class TestReplay:
    def test_wildcard_is_append_order(self):
        items = notes(200)
        assert list(filled(items).replay(ALL)) == items

    def test_empty_range(self):
        st = filled(notes(10))
        assert list(st.replay(ALL, 4, 4)) == []

    @pytest.mark.parametrize("lo,hi", [(-1, 3), (5, 4), (0, 11)])
    def test_bad_range(self, lo, hi):
        with pytest.raises(OffsetRange):
            filled(notes(10)).replay(ALL, lo, hi)

    def test_symbol_filter_equals_linear_scan(self):
        items = notes(300, seed=2)
        st = filled(items)
        f = SubscriptionFilter(symbols=frozenset({SYMS[1]}))
        assert list(st.replay(f, 17, 251)) == [n for n in items[17:251] if n.symbol == SYMS[1]]

    def test_random_filters_equal_filtered_wildcard(self):
        items = notes(400, seed=3)
        st = filled(items)
        rng = random.Random(1)
        for _ in range(200):
            f = SubscriptionFilter(
                source=rng.choice((None, "A", "B")),
                symbols=frozenset(rng.sample(SYMS, rng.randint(1, 3))) if rng.random() < 0.5 else None,
            )
            lo = rng.randint(0, 400)
            hi = rng.randint(lo, 400)
            assert list(st.replay(f, lo, hi)) == [n for n in list(st.replay(ALL))[lo:hi] if filter_matches(f, n)]
        for _ in range(50):
            f = random_filter(rng)
            assert list(st.replay(f)) == [n for n in items if filter_matches(f, n)]

    def test_replay_source(self):
        items = notes(100, seed=4)
        st = filled(items)
        got = st.replay_source("A", ALL, after_seq=10)
        assert [n.seq for n in got] == sorted(n.seq for n in items if n.source == "A" and n.seq > 10)
        assert st.last_seq("A") == max(n.seq for n in items if n.source == "A")
        assert st.last_seq("nobody") == 0


class TestLatest:
    def test_unknown(self):
        assert filled(notes(5)).latest(SymbolKey.parse("ZZ.SIM")) is None

    def test_third_append(self):
        st = EventStore()
        k = SymbolKey.parse("AAA.SIM")
        ns = [EventNotification("A", i, k, EventType.STATUS) for i in (1, 2, 3)]
        for n in ns:
            st.append(n)
        assert st.latest(k) is ns[2]

    def test_equals_replay_tail(self):
        st = filled(notes(500, seed=5))
        for s in SYMS:
            tail = list(st.replay(SubscriptionFilter(symbols=frozenset({s}))))
            assert st.latest(s) == tail[-1]

    def test_latest_matching(self):
        st = filled(notes(200, seed=6))
        f = SubscriptionFilter(event_types=frozenset({EventType.TRADE}))
        for s in SYMS:
            hits = [n for n in st.replay(ALL) if n.symbol == s and filter_matches(f, n)]
            assert st.latest_matching(s, f) == (hits[-1] if hits else None)


class TestDurability:
    def test_reopen_gives_identical_frames(self, tmp_path):
        items = notes(300, seed=7)
        with EventStore(tmp_path / "s", segment_bytes=2_000) as st:
            for n in items:
                st.append(n)
            frames = [st.frame_at(i) for i in range(st.end)]
            segs = len(st.segments)
        assert segs > 1
        with EventStore(tmp_path / "s", segment_bytes=2_000) as st2:
            assert [st2.frame_at(i) for i in range(st2.end)] == frames
            assert list(st2.replay(ALL)) == items
            manifest = (tmp_path / "s" / "MANIFEST").read_text().split()
            assert sum(int(c) for c in manifest[1::2]) == len(items)
            with pytest.raises(DuplicateKey):
                st2.append(items[0])

    def test_torn_tail_is_dropped(self, tmp_path):
        items = notes(30, seed=8)
        with EventStore(tmp_path / "s") as st:
            for n in items:
                st.append(n)
        seg = next((tmp_path / "s").glob("segment-*.seg"))
        data = seg.read_bytes()
        seg.write_bytes(data[:-5])
        with EventStore(tmp_path / "s") as st2:
            assert list(st2.replay(ALL)) == items[:-1]
            st2.append(items[-1])
        with EventStore(tmp_path / "s") as st3:
            assert list(st3.replay(ALL)) == items

    def test_concurrent_reader_sees_prefix(self):
        import threading

        items = notes(2000, seed=9)
        st = EventStore()
        seen = []

        def reader():
            while st.end < len(items):
                k = st.end
                prefix = list(st.replay(ALL, 0, k))
                seen.append(prefix == items[:k])

        th = threading.Thread(target=reader)
        th.start()
        for n in items:
            st.append(n)
        th.join()
        assert all(seen)
