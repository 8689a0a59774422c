"""Append-only event store with filtered replay and per-symbol snapshots.

On disk a store is a directory of segment files (concatenated notification
frames) plus a ``MANIFEST`` listing ``<segment_id> <frame_count>`` per line.
The index lives in memory and is rebuilt from the segments on open.
"""

from __future__ import annotations

import os
import threading
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

from .model import (
    EventNotification,
    MalformedFrame,
    SubscriptionFilter,
    SymbolKey,
    decode_notification_at,
    encode_notification,
    filter_matches,
)

SEGMENT_BYTES = 64 * 1024 * 1024
MANIFEST = "MANIFEST"


class StoreError(Exception):
    pass


class DuplicateKey(StoreError):
    def __init__(self, source: str, seq: int):
        self.key = (source, seq)
        super().__init__(f"duplicate notification {source}/{seq}")


class StorageFull(StoreError):
    pass


class OffsetRange(StoreError, IndexError):
    pass


@dataclass
class StoreSegment:
    segment_id: int
    first_offset: int
    frame_count: int = 0
    byte_size: int = 0


def _segment_name(segment_id: int) -> str:
    return f"segment-{segment_id:08d}.seg"


class EventStore:
    """Single-writer log; readers see a consistent prefix without blocking the writer.

    Offsets are ordinal positions in the log: the first append returns 0.
    """

    def __init__(
        self,
        path: str | os.PathLike | None = None,
        *,
        segment_bytes: int = SEGMENT_BYTES,
        capacity_bytes: Optional[int] = None,
        fsync: bool = False,
    ):
        self.path = Path(path) if path is not None else None
        self.segment_bytes = segment_bytes
        self.capacity_bytes = capacity_bytes
        self.fsync = fsync
        self._lock = threading.Lock()
        self._frames: list[bytes] = []
        self._items: list[EventNotification] = []
        self._by_symbol: dict[SymbolKey, list[int]] = {}
        self._by_source: dict[str, dict[int, int]] = {}
        self._max_seq: dict[str, int] = {}
        self._segments: list[StoreSegment] = []
        self._bytes = 0
        self._fh = None
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- persistence -------------------------------------------------------

    def _load(self) -> None:
        ids = set()
        manifest = self.path / MANIFEST
        if manifest.exists():
            for line in manifest.read_text().splitlines():
                if line.strip():
                    ids.add(int(line.split()[0]))
        # segments written after the last manifest update are picked up too
        for p in self.path.glob("segment-*.seg"):
            ids.add(int(p.stem.split("-")[1]))
        for segment_id in sorted(ids):
            seg = StoreSegment(segment_id, len(self._items))
            self._segments.append(seg)
            p = self.path / _segment_name(segment_id)
            data = p.read_bytes() if p.exists() else b""
            pos = 0
            while pos < len(data):
                try:
                    n, consumed = decode_notification_at(data, pos)
                except MalformedFrame:
                    # torn tail from an interrupted write
                    with open(p, "r+b") as fh:
                        fh.truncate(pos)
                    break
                self._index(n, data[pos : pos + consumed])
                seg.frame_count += 1
                seg.byte_size += consumed
                pos += consumed
        self._write_manifest()

    def _write_manifest(self) -> None:
        if self.path is None:
            return
        tmp = self.path / (MANIFEST + ".tmp")
        tmp.write_text("".join(f"{s.segment_id} {s.frame_count}\n" for s in self._segments))
        os.replace(tmp, self.path / MANIFEST)

    def _writer(self, frame_len: int):
        seg = self._segments[-1] if self._segments else None
        if seg is None or (seg.byte_size and seg.byte_size + frame_len > self.segment_bytes):
            if self._fh is not None:
                self._fh.close()
                self._fh = None
            seg = StoreSegment(seg.segment_id + 1 if seg else 0, len(self._items))
            self._segments.append(seg)
            self._write_manifest()
        if self._fh is None and self.path is not None:
            self._fh = open(self.path / _segment_name(seg.segment_id), "ab")
        return seg

    def flush(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            self._write_manifest()

    def close(self) -> None:
        self.flush()
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> EventStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writing -----------------------------------------------------------

    def _index(self, n: EventNotification, frame: bytes) -> int:
        offset = len(self._items)
        self._by_symbol.setdefault(n.symbol, []).append(offset)
        self._by_source.setdefault(n.source, {})[n.seq] = offset
        if n.seq > self._max_seq.get(n.source, 0):
            self._max_seq[n.source] = n.seq
        self._frames.append(frame)
        self._bytes += len(frame)
        # publish last so readers never observe a half-indexed entry
        self._items.append(n)
        return offset

    def append(self, n: EventNotification) -> int:
        frame = encode_notification(n)
        with self._lock:
            if n.seq in self._by_source.get(n.source, ()):
                raise DuplicateKey(n.source, n.seq)
            if self.capacity_bytes is not None and self._bytes + len(frame) > self.capacity_bytes:
                raise StorageFull(f"store capacity {self.capacity_bytes} bytes reached")
            seg = self._writer(len(frame))
            if self._fh is not None:
                self._fh.write(frame)
                self._fh.flush()
            seg.frame_count += 1
            seg.byte_size += len(frame)
            return self._index(n, frame)

    # -- reading -----------------------------------------------------------

    @property
    def end(self) -> int:
        return len(self._items)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def segments(self) -> list[StoreSegment]:
        return list(self._segments)

    def frame_at(self, offset: int) -> bytes:
        return self._frames[offset]

    def get(self, source: str, seq: int) -> Optional[EventNotification]:
        off = self._by_source.get(source, {}).get(seq)
        return None if off is None else self._items[off]

    def replay(
        self,
        filt: SubscriptionFilter,
        from_offset: int = 0,
        to_offset: Optional[int] = None,
    ) -> Iterator[EventNotification]:
        """Yield stored notifications in ``[from_offset, to_offset)`` matching ``filt``."""
        end = len(self._items)
        if to_offset is None:
            to_offset = end
        if not 0 <= from_offset <= to_offset <= end:
            raise OffsetRange(f"bad replay range [{from_offset}, {to_offset}) with end {end}")
        return self._replay(filt, from_offset, to_offset)

    def _replay(self, filt, lo, hi) -> Iterator[EventNotification]:
        items = self._items
        if filt.symbols is not None:
            offsets = []
            for s in filt.symbols:
                idx = self._by_symbol.get(s)
                if idx:
                    offsets.extend(idx[bisect_left(idx, lo) : bisect_left(idx, hi)])
            offsets.sort()
            for off in offsets:
                n = items[off]
                if filter_matches(filt, n):
                    yield n
            return
        for off in range(lo, hi):
            n = items[off]
            if filter_matches(filt, n):
                yield n

    def replay_source(
        self,
        source: str,
        filt: SubscriptionFilter,
        after_seq: int = 0,
        min_ingest_ts: int = 0,
    ) -> list[EventNotification]:
        """Matching notifications of one source with seq > ``after_seq``, in seq order."""
        by_seq = self._by_source.get(source)
        if not by_seq:
            return []
        items = self._items
        out = []
        for seq in sorted(s for s in by_seq if s > after_seq):
            n = items[by_seq[seq]]
            if n.ingest_ts_ms >= min_ingest_ts and filter_matches(filt, n):
                out.append(n)
        return out

    def latest(self, symbol: SymbolKey) -> Optional[EventNotification]:
        idx = self._by_symbol.get(symbol)
        return self._items[idx[-1]] if idx else None

    def latest_matching(self, symbol: SymbolKey, filt: SubscriptionFilter) -> Optional[EventNotification]:
        for off in reversed(self._by_symbol.get(symbol, ())):
            n = self._items[off]
            if filter_matches(filt, n):
                return n
        return None

    def latest_where(self, symbol: SymbolKey, pred: Callable[[EventNotification], bool]) -> Optional[EventNotification]:
        for off in reversed(self._by_symbol.get(symbol, ())):
            n = self._items[off]
            if pred(n):
                return n
        return None

    def last_seq(self, source: str) -> int:
        """Highest stored seq of ``source`` (0 when none)."""
        return self._max_seq.get(source, 0)

    def symbols(self) -> list[SymbolKey]:
        return list(self._by_symbol)
