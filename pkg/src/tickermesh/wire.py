"""Broker wire protocol: ``u32 length | u8 kind | payload`` frames.

``length`` counts the kind byte plus the payload. Strings are ``u8 length +
ascii``; filters use the canonical filter TLV with a ``u16`` length prefix.
Kinds 9 and 10 (RESYNC/REPLAY) carry the store-backed recovery exchange.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

from .model import (
    EventNotification,
    MalformedFrame,
    QoI,
    SubscriptionFilter,
    decode_filter,
    decode_notification_at,
    encode_filter,
    encode_notification,
)

MAX_FRAME = 16 * 1024 * 1024

_LEN = struct.Struct(">I")


class ProtocolError(ValueError):
    pass


class Kind(IntEnum):
    HELLO = 1
    SUB = 2
    UNSUB = 3
    PUB = 4
    LSA = 5
    SUBADV = 6
    HEARTBEAT = 7
    CREDIT = 8
    RESYNC = 9
    REPLAY = 10


class PeerKind(IntEnum):
    CLIENT = 1
    NEIGHBOR_BROKER = 2
    FEED = 3


class ResyncMode(IntEnum):
    AFTER_SEQ = 1  # everything matching after a sequence number (COMPLETE)
    LATEST = 2  # newest matching notification per symbol (CONFLATED)


@dataclass(frozen=True, slots=True)
class Hello:
    node_id: str
    kind: PeerKind
    site: str = ""


@dataclass(frozen=True, slots=True)
class Subscribe:
    sub_id: int
    qoi: QoI
    filter: SubscriptionFilter


@dataclass(frozen=True, slots=True)
class Unsubscribe:
    sub_id: int


@dataclass(frozen=True, slots=True)
class Publish:
    notification: EventNotification


@dataclass(frozen=True, slots=True)
class LinkStateAd:
    origin: str
    lsa_seq: int
    neighbors: tuple[tuple[str, int], ...]
    site: str = ""
    sources: tuple[str, ...] = ()


@dataclass(frozen=True, slots=True)
class SubscriptionAd:
    origin: str
    advert_seq: int
    filters: tuple[SubscriptionFilter, ...]


@dataclass(frozen=True, slots=True)
class Heartbeat:
    ts_ms: int


@dataclass(frozen=True, slots=True)
class Credit:
    n: int


@dataclass(frozen=True, slots=True)
class Resync:
    req_id: int
    requester: str
    target: str
    source: str
    mode: ResyncMode
    filters: tuple[SubscriptionFilter, ...]
    after_seq: int = 0
    after_ts: int = 0


@dataclass(frozen=True, slots=True)
class Replay:
    req_id: int
    responder: str
    target: str
    available: bool
    last_seq: int
    notifications: tuple[EventNotification, ...] = ()


Message = Union[
    Hello, Subscribe, Unsubscribe, Publish, LinkStateAd, SubscriptionAd, Heartbeat, Credit, Resync, Replay
]


class _Writer:
    __slots__ = ("parts",)

    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int):
        self.parts.append(struct.pack(">B", v))

    def u16(self, v: int):
        self.parts.append(struct.pack(">H", v))

    def u32(self, v: int):
        self.parts.append(struct.pack(">I", v))

    def u64(self, v: int):
        self.parts.append(struct.pack(">Q", v))

    def str8(self, s: str):
        b = s.encode("ascii")
        if len(b) > 255:
            raise ValueError("string too long")
        self.parts.append(bytes((len(b),)) + b)

    def blob16(self, b: bytes):
        self.u16(len(b))
        self.parts.append(b)

    def raw(self, b: bytes):
        self.parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError(f"payload truncated at byte {self.pos}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def str8(self) -> str:
        try:
            return self._take(self.u8()).decode("ascii")
        except UnicodeDecodeError:
            raise ProtocolError(f"non-ascii string before byte {self.pos}") from None

    def blob16(self) -> bytes:
        return self._take(self.u16())

    def notification(self):
        try:
            n, consumed = decode_notification_at(self.buf, self.pos)
        except MalformedFrame as exc:
            raise ProtocolError(str(exc)) from None
        self.pos += consumed
        return n

    def filter(self) -> SubscriptionFilter:
        try:
            return decode_filter(self.blob16())
        except (MalformedFrame, ValueError) as exc:
            raise ProtocolError(f"bad filter: {exc}") from None

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing bytes")


def encode_payload(msg: Message) -> tuple[Kind, bytes]:
    w = _Writer()
    if isinstance(msg, Publish):
        return Kind.PUB, encode_notification(msg.notification)
    if isinstance(msg, Hello):
        w.str8(msg.node_id)
        w.u8(msg.kind)
        w.str8(msg.site)
        return Kind.HELLO, w.getvalue()
    if isinstance(msg, Subscribe):
        w.u64(msg.sub_id)
        w.u8(msg.qoi)
        w.blob16(encode_filter(msg.filter))
        return Kind.SUB, w.getvalue()
    if isinstance(msg, Unsubscribe):
        w.u64(msg.sub_id)
        return Kind.UNSUB, w.getvalue()
    if isinstance(msg, LinkStateAd):
        w.str8(msg.origin)
        w.u64(msg.lsa_seq)
        w.u16(len(msg.neighbors))
        for peer, latency in msg.neighbors:
            w.str8(peer)
            w.u32(latency)
        w.str8(msg.site)
        w.u16(len(msg.sources))
        for s in msg.sources:
            w.str8(s)
        return Kind.LSA, w.getvalue()
    if isinstance(msg, SubscriptionAd):
        w.str8(msg.origin)
        w.u64(msg.advert_seq)
        w.u16(len(msg.filters))
        for f in msg.filters:
            w.blob16(encode_filter(f))
        return Kind.SUBADV, w.getvalue()
    if isinstance(msg, Heartbeat):
        w.u64(msg.ts_ms)
        return Kind.HEARTBEAT, w.getvalue()
    if isinstance(msg, Credit):
        w.u32(msg.n)
        return Kind.CREDIT, w.getvalue()
    if isinstance(msg, Resync):
        w.u64(msg.req_id)
        w.str8(msg.requester)
        w.str8(msg.target)
        w.str8(msg.source)
        w.u8(msg.mode)
        w.u16(len(msg.filters))
        for f in msg.filters:
            w.blob16(encode_filter(f))
        w.u64(msg.after_seq)
        w.u64(msg.after_ts)
        return Kind.RESYNC, w.getvalue()
    if isinstance(msg, Replay):
        w.u64(msg.req_id)
        w.str8(msg.responder)
        w.str8(msg.target)
        w.u8(1 if msg.available else 0)
        w.u64(msg.last_seq)
        w.u32(len(msg.notifications))
        for n in msg.notifications:
            w.raw(encode_notification(n))
        return Kind.REPLAY, w.getvalue()
    raise TypeError(f"not a wire message: {msg!r}")


def encode_message(msg: Message) -> bytes:
    kind, payload = encode_payload(msg)
    return _LEN.pack(len(payload) + 1) + bytes((kind,)) + payload


def decode_payload(kind: int, payload: bytes) -> Message:
    r = _Reader(payload)
    if kind == Kind.PUB:
        msg = Publish(r.notification())
    elif kind == Kind.HELLO:
        node_id = r.str8()
        pk = r.u8()
        if pk not in (1, 2, 3):
            raise ProtocolError(f"bad peer kind {pk}")
        msg = Hello(node_id, PeerKind(pk), r.str8())
    elif kind == Kind.SUB:
        sub_id = r.u64()
        q = r.u8()
        if q not in (1, 2):
            raise ProtocolError(f"bad qoi {q}")
        msg = Subscribe(sub_id, QoI(q), r.filter())
    elif kind == Kind.UNSUB:
        msg = Unsubscribe(r.u64())
    elif kind == Kind.LSA:
        origin = r.str8()
        seq = r.u64()
        neighbors = tuple((r.str8(), r.u32()) for _ in range(r.u16()))
        site = r.str8()
        sources = tuple(r.str8() for _ in range(r.u16()))
        msg = LinkStateAd(origin, seq, neighbors, site, sources)
    elif kind == Kind.SUBADV:
        origin = r.str8()
        seq = r.u64()
        msg = SubscriptionAd(origin, seq, tuple(r.filter() for _ in range(r.u16())))
    elif kind == Kind.HEARTBEAT:
        msg = Heartbeat(r.u64())
    elif kind == Kind.CREDIT:
        msg = Credit(r.u32())
    elif kind == Kind.RESYNC:
        req_id = r.u64()
        requester, target, source = r.str8(), r.str8(), r.str8()
        mode = r.u8()
        if mode not in (1, 2):
            raise ProtocolError(f"bad resync mode {mode}")
        filters = tuple(r.filter() for _ in range(r.u16()))
        msg = Resync(req_id, requester, target, source, ResyncMode(mode), filters, r.u64(), r.u64())
    elif kind == Kind.REPLAY:
        req_id = r.u64()
        responder, target = r.str8(), r.str8()
        available = bool(r.u8())
        last_seq = r.u64()
        notes = tuple(r.notification() for _ in range(r.u32()))
        msg = Replay(req_id, responder, target, available, last_seq, notes)
    else:
        raise ProtocolError(f"unknown frame kind {kind}")
    r.done()
    return msg


def decode_message(frame: bytes) -> Message:
    if len(frame) < 5:
        raise ProtocolError("frame shorter than header")
    (length,) = _LEN.unpack_from(frame, 0)
    if length < 1 or len(frame) != 4 + length:
        raise ProtocolError(f"length field {length} does not match frame size {len(frame)}")
    return decode_payload(frame[4], frame[5:])


class FrameDecoder:
    """Incremental splitter for a byte stream of wire frames."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while len(self._buf) >= 4:
            (length,) = _LEN.unpack_from(self._buf, 0)
            if length < 1 or length > self.max_frame:
                raise ProtocolError(f"bad frame length {length}")
            if len(self._buf) < 4 + length:
                break
            kind = self._buf[4]
            payload = bytes(self._buf[5 : 4 + length])
            del self._buf[: 4 + length]
            out.append(decode_payload(kind, payload))
        return out
