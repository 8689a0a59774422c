"""Broker node: client sessions, content matching, QoI delivery and mesh forwarding.

A broker is driven by one logical event loop. The transport is duck-typed
and supplies three calls::

    net.now() -> int                      # milliseconds
    net.send(peer_id, message) -> None    # to a neighbour broker
    net.call_later(delay_ms, fn) -> None

Neighbour links carry the wire messages of :mod:`tickermesh.wire`. Client
sessions are local objects; a daemon maps them onto sockets.
"""

from __future__ import annotations

import itertools
import logging
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .model import (
    EventNotification,
    QoI,
    Subscription,
    SubscriptionFilter,
    SymbolKey,
    filter_matches,
)
from .overlay import RoutingState, advertise, apply_lsa, next_hop, purge_stale
from .store import DuplicateKey, EventStore
from .wire import (
    Credit,
    Heartbeat,
    Hello,
    LinkStateAd,
    Message,
    PeerKind,
    Publish,
    Replay,
    Resync,
    ResyncMode,
    SubscriptionAd,
)

log = logging.getLogger(__name__)

HEARTBEAT_MS = 1_000
MISSED_HEARTBEATS = 3
LIVENESS_CHECK_MS = 250
LSA_REFRESH_MS = 10_000
LSA_MAX_AGE_MS = 30_000
DEDUPE_WINDOW = 1 << 16
DEFAULT_QUEUE_CAPACITY = 1024
RESYNC_SETTLE_MS = 1_000
RESYNC_TIMEOUT_MS = 2_000

LOCAL_FEED = None  # arrival marker for notifications from an attached feed


class BrokerError(Exception):
    pass


class DuplicateSubscription(BrokerError):
    pass


class UnknownSubscription(BrokerError):
    pass


class KeyWindow:
    """(source, seq) membership with LRU eviction of ``size`` entries per source."""

    __slots__ = ("size", "_by_source")

    def __init__(self, size: int = DEDUPE_WINDOW):
        self.size = size
        self._by_source: dict[str, OrderedDict] = {}

    def add(self, source: str, seq: int) -> bool:
        """Record the key; False if it was already present."""
        od = self._by_source.get(source)
        if od is None:
            od = self._by_source[source] = OrderedDict()
        elif seq in od:
            od.move_to_end(seq)
            return False
        od[seq] = None
        if len(od) > self.size:
            od.popitem(last=False)
        return True

    def __contains__(self, key: tuple[str, int]) -> bool:
        od = self._by_source.get(key[0])
        return od is not None and key[1] in od

    def __len__(self) -> int:
        return sum(len(od) for od in self._by_source.values())


# ---------------------------------------------------------------------------
# Sessions


class _Slot:
    """A conflated queue entry; a newer value for the symbol replaces ``n`` in place.

    COMPLETE entries sit in the queues as bare notifications.
    """

    __slots__ = ("n",)

    def __init__(self, n: EventNotification):
        self.n = n


@dataclass(frozen=True, slots=True)
class DeliveryRecord:
    session_id: int
    key: tuple[str, int]
    deliver_ts_ms: int
    dropped_superseded_count: int

    def __post_init__(self) -> None:
        if self.dropped_superseded_count < 0:
            raise ValueError("counts are non-negative")


@dataclass
class _Recovery:
    horizon: Optional[int]
    buffer: list = field(default_factory=list)
    req_id: Optional[int] = None


class Session:
    """One consumer attached to a broker.

    COMPLETE entries take a credit and a queue place, or wait in unbounded
    staging. CONFLATED entries live in per-symbol slots that newer values
    overwrite in place, so a slow reader only ever sees the latest value.
    """

    def __init__(
        self,
        session_id: int,
        peer_kind: PeerKind = PeerKind.CLIENT,
        capacity: int = DEFAULT_QUEUE_CAPACITY,
        opened_ms: int = 0,
    ):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.session_id = session_id
        self.peer_kind = peer_kind
        self.capacity = capacity
        self.opened_ms = opened_ms
        self.subscriptions: dict[int, Subscription] = {}
        self.subscribed_at: dict[int, int] = {}
        self.delivery_queue: deque[_Slot] = deque()
        self.staging: deque[_Slot] = deque()
        self.conflation_slots: dict[SymbolKey, _Slot] = {}
        self.credits = capacity
        self.dedupe_horizon: dict[str, int] = {}
        self.symbol_seq: dict[tuple[str, SymbolKey], int] = {}
        # COMPLETE traffic only feeds symbol_seq once the session also conflates
        self.track_symbols = False
        self.recovering: dict[str, _Recovery] = {}
        self.matched = 0
        self.delivered = 0
        self.dropped_superseded = 0
        self.discarded = 0
        self.closed = False

    def __repr__(self) -> str:
        return f"Session({self.session_id}, subs={sorted(self.subscriptions)})"

    def filters(self, qoi: QoI) -> tuple[SubscriptionFilter, ...]:
        return tuple(s.filter for s in self.subscriptions.values() if s.qoi is qoi)

    def wants(self, n: EventNotification, qoi: QoI) -> bool:
        return any(s.qoi is qoi and filter_matches(s.filter, n) for s in self.subscriptions.values())

    @property
    def pending(self) -> int:
        return len(self.delivery_queue) + len(self.staging)

    @property
    def backpressured(self) -> bool:
        return bool(self.staging)

    def enqueue_complete(self, n: EventNotification) -> bool:
        source, seq = n.source, n.seq
        horizon = self.dedupe_horizon
        if seq <= horizon.get(source, 0):
            self.discarded += 1
            return False
        horizon[source] = seq
        if self.track_symbols:
            key = (source, n.symbol)
            if seq > self.symbol_seq.get(key, 0):
                self.symbol_seq[key] = seq
        self.matched += 1
        if self.conflation_slots:
            # an older conflated value may stay queued ahead, but must not be overwritten past n
            self.conflation_slots.pop(n.symbol, None)
        if self.credits > 0 and not self.staging and len(self.delivery_queue) < self.capacity:
            self.delivery_queue.append(n)
            self.credits -= 1
        else:
            self.staging.append(n)
        return True

    def enqueue_conflated(self, n: EventNotification) -> bool:
        self.track_symbols = True
        key = (n.source, n.symbol)
        if n.seq <= self.symbol_seq.get(key, 0):
            self.discarded += 1
            return False
        self.symbol_seq[key] = n.seq
        self.matched += 1
        slot = self.conflation_slots.get(n.symbol)
        if slot is not None:
            slot.n = n
            self.dropped_superseded += 1
            return True
        slot = self.conflation_slots[n.symbol] = _Slot(n)
        (self.staging if self.staging else self.delivery_queue).append(slot)
        return True

    def enqueue(self, n: EventNotification, qoi: QoI) -> bool:
        if qoi is QoI.COMPLETE:
            return self.enqueue_complete(n)
        return self.enqueue_conflated(n)

    def drain(self, max_count: int) -> list[EventNotification]:
        """Remove up to ``max_count`` notifications in delivery order."""
        out = []
        queue = self.delivery_queue
        slots = self.conflation_slots
        credits = self.credits
        while len(out) < max_count:
            if not queue:
                self.credits = credits
                if not self._refill():
                    break
                credits = self.credits
            entry = queue.popleft()
            if entry.__class__ is _Slot:
                n = entry.n
                if slots.get(n.symbol) is entry:
                    del slots[n.symbol]
                out.append(n)
            else:
                if credits < self.capacity:
                    credits += 1
                out.append(entry)
        self.credits = credits
        self.delivered += len(out)
        if self.staging:
            self._refill()
        return out

    def _refill(self) -> bool:
        """Move staged entries into the queue as credits allow; True if any moved."""
        staging, queue = self.staging, self.delivery_queue
        moved = False
        while staging and len(queue) < self.capacity:
            if staging[0].__class__ is not _Slot:
                if self.credits <= 0:
                    break
                self.credits -= 1
            queue.append(staging.popleft())
            moved = True
        return moved

    def grant(self, n: int) -> None:
        self.credits = min(self.capacity, self.credits + n)


# ---------------------------------------------------------------------------
# Matching


class SubscriptionIndex:
    """Finds candidate subscriptions by symbol, prefix or source before full matching.

    Each bucket groups its entries by filter, so a filter shared by many
    subscriptions is evaluated once per notification. Entries whose symbol
    or prefix is settled by the bucket lookup itself, and which constrain
    nothing else, sit under the key ``None`` and need no check at all.
    """

    def __init__(self):
        self._by_symbol: dict[SymbolKey, dict] = {}
        self._by_prefix: dict[str, dict] = {}
        self._prefix_lens: list[int] = []
        self._by_source: dict[str, dict] = {}
        self._rest: dict = {}
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def _places(self, f: SubscriptionFilter) -> list[tuple[dict, object]]:
        if f.symbols is not None:
            return [(self._by_symbol, s) for s in f.symbols]
        if f.prefix is not None:
            return [(self._by_prefix, f.prefix)]
        if f.source is not None:
            return [(self._by_source, f.source)]
        return []

    @staticmethod
    def _group_key(f: SubscriptionFilter) -> Optional[SubscriptionFilter]:
        keyed = f.symbols is not None or f.prefix is not None
        plain = keyed and f.source is None and f.instrument_class is None and f.event_types is None
        return None if plain else f

    def add(self, session: Session, sub: Subscription) -> None:
        f = sub.filter
        gk = self._group_key(f)
        entry = (session, sub.qoi is QoI.COMPLETE, sub.id)
        places = self._places(f)
        if not places:
            self._rest.setdefault(gk, []).append(entry)
        for table, key in places:
            table.setdefault(key, {}).setdefault(gk, []).append(entry)
        if f.prefix is not None:
            self._prefix_lens = sorted({len(p) for p in self._by_prefix})
        self._count += 1

    def remove(self, session: Session, sub: Subscription) -> None:
        f = sub.filter
        gk = self._group_key(f)
        places = self._places(f)
        buckets = [(table, key, table.get(key)) for table, key in places] if places else [(None, None, self._rest)]
        for table, key, bucket in buckets:
            if bucket is None or gk not in bucket:
                continue
            kept = [e for e in bucket[gk] if not (e[0] is session and e[2] == sub.id)]
            if kept:
                bucket[gk] = kept
            else:
                del bucket[gk]
                if table is not None and not bucket:
                    del table[key]
        if f.prefix is not None:
            self._prefix_lens = sorted({len(p) for p in self._by_prefix})
        self._count -= 1

    def match(self, n: EventNotification) -> dict[Session, bool]:
        """Sessions with a matching subscription; value is True if any match is COMPLETE."""
        hits: dict[Session, bool] = {}
        g = self._by_symbol.get(n.symbol)
        if g:
            _collect(g, n, hits)
        if self._prefix_lens:
            text = n.symbol.rendered
            for length in self._prefix_lens:
                if length > len(text):
                    break
                g = self._by_prefix.get(text[:length])
                if g:
                    _collect(g, n, hits)
        g = self._by_source.get(n.source)
        if g:
            _collect(g, n, hits)
        if self._rest:
            _collect(self._rest, n, hits)
        return hits


def _collect(bucket: dict, n: EventNotification, hits: dict) -> None:
    for f, entries in bucket.items():
        if f is None or filter_matches(f, n):
            for session, complete, _ in entries:
                if complete:
                    hits[session] = True
                elif session not in hits:
                    hits[session] = False


# ---------------------------------------------------------------------------
# Broker


@dataclass
class Link:
    peer: str
    cost: int = 1
    up: bool = False
    hello_sent: bool = False
    last_heard: int = 0
    keys: KeyWindow = field(default_factory=KeyWindow)


class Broker:
    def __init__(
        self,
        node_id: str,
        site: str = "",
        net=None,
        *,
        store: Optional[EventStore] = None,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        dedupe_window: int = DEDUPE_WINDOW,
        heartbeat_ms: int = HEARTBEAT_MS,
        settle_ms: int = RESYNC_SETTLE_MS,
    ):
        self.node_id = node_id
        self.site = site
        self.net = net
        self.store = store
        self.queue_capacity = queue_capacity
        self.dedupe_window = dedupe_window
        self.heartbeat_ms = heartbeat_ms
        self.settle_ms = settle_ms
        self.routing = RoutingState(node_id)
        self.links: dict[str, Link] = {}
        self.sessions: dict[int, Session] = {}
        self.index = SubscriptionIndex()
        self.local_sources: set[str] = set()
        self.lsa_seq = 0
        self.seen = KeyWindow(dedupe_window)
        self.stats: Counter = Counter()
        self.on_topology_change: Optional[Callable[[Broker], None]] = None
        self._session_ids = itertools.count(1)
        self._req_ids = itertools.count(1)
        self._requests: dict[int, tuple[int, str, ResyncMode]] = {}
        self._latest_pending: dict[int, set[str]] = {}
        self._settle_gen = 0
        self._settle_armed = False
        self._last_refresh = 0
        self._last_heartbeat = 0
        self.stopped = False

    def __repr__(self) -> str:
        return f"Broker({self.node_id!r})"

    # -- plumbing -----------------------------------------------------------

    def now(self) -> int:
        return self.net.now() if self.net is not None else 0

    def _send(self, peer: str, msg: Message) -> None:
        if self.net is not None:
            self.net.send(peer, msg)

    def _later(self, delay_ms: int, fn) -> None:
        if self.net is not None:
            self.net.call_later(delay_ms, fn)

    def start(self) -> None:
        """Originate the first LSA and start the maintenance timer."""
        self._originate_lsa()
        self._later(LIVENESS_CHECK_MS, self._tick)

    def stop(self) -> None:
        self.stopped = True
        if self.store is not None:
            self.store.flush()

    def _tick(self) -> None:
        if self.stopped:
            return
        now = self.now()
        if now - self._last_heartbeat >= self.heartbeat_ms:
            self._last_heartbeat = now
            for link in self.links.values():
                if link.up:
                    self._send(link.peer, Heartbeat(now))
        deadline = MISSED_HEARTBEATS * self.heartbeat_ms
        for link in list(self.links.values()):
            if link.up and now - link.last_heard > deadline:
                log.info("%s: link to %s timed out", self.node_id, link.peer)
                self._link_down(link)
        if now - self._last_refresh >= LSA_REFRESH_MS:
            self._originate_lsa()
        view, dead = purge_stale(self.routing.view, now, LSA_MAX_AGE_MS)
        if dead:
            for origin in dead:
                self.routing.adverts.pop(origin, None)
            self._install_view(view)
        self._later(LIVENESS_CHECK_MS, self._tick)

    # -- links and topology ---------------------------------------------------

    def connect(self, peer: str, cost: int = 1, *, hello_sent: bool = False) -> None:
        """A transport connection to ``peer`` was (re)established.

        ``hello_sent`` means the transport already carried our Hello, as when
        a daemon dials an address before it knows which broker answers.
        """
        link = self.links.get(peer)
        if link is None:
            link = self.links[peer] = Link(peer, cost, keys=KeyWindow(self.dedupe_window))
        elif link.up:
            self._link_down(link)
        link.cost = cost
        link.hello_sent = True
        if not hello_sent:
            self._send(peer, Hello(self.node_id, PeerKind.NEIGHBOR_BROKER, self.site))

    def disconnect(self, peer: str) -> None:
        """The transport reports the connection to ``peer`` closed."""
        link = self.links.get(peer)
        if link is not None and link.up:
            self._link_down(link)
        if link is not None:
            link.hello_sent = False

    def handle_link_event(self, peer: str, up: bool, cost: int = 1) -> None:
        if up:
            self.connect(peer, cost)
        else:
            self.disconnect(peer)

    def _link_up(self, link: Link) -> None:
        link.up = True
        link.last_heard = self.now()
        self.stats["link_up"] += 1
        self._originate_lsa()
        # database exchange: everything we know, so the newcomer converges at once
        for lsa in self.routing.view.lsas.values():
            self._send(link.peer, lsa)
        for ad in self.routing.adverts.values():
            self._send(link.peer, ad)
        if self.routing.advert_seq:
            self._send(
                link.peer,
                SubscriptionAd(self.node_id, self.routing.advert_seq, self.routing.local_filters),
            )

    def _link_down(self, link: Link) -> None:
        link.up = False
        link.hello_sent = False
        self.stats["link_down"] += 1
        self._originate_lsa()
        # the link may have eaten notifications in flight
        self._begin_recovery_all()

    def _originate_lsa(self) -> None:
        self.lsa_seq += 1
        self._last_refresh = self.now()
        neighbors = tuple(sorted((l.peer, l.cost) for l in self.links.values() if l.up))
        lsa = LinkStateAd(self.node_id, self.lsa_seq, neighbors, self.site, tuple(sorted(self.local_sources)))
        view, _ = apply_lsa(self.routing.view, lsa, self.now())
        self._flood(lsa, None)
        self._install_view(view)

    def add_local_source(self, source: str) -> None:
        if source not in self.local_sources:
            self.local_sources.add(source)
            self._originate_lsa()

    def _flood(self, msg: Message, arrival: Optional[str]) -> None:
        for link in self.links.values():
            if link.up and link.peer != arrival:
                self._send(link.peer, msg)

    def _install_view(self, view) -> None:
        if self.routing.set_view(view):
            self.stats["topology_changes"] += 1
            self._begin_recovery_all()
            if self.on_topology_change is not None:
                self.on_topology_change(self)

    def _on_lsa(self, lsa: LinkStateAd, arrival: str) -> None:
        if lsa.origin == self.node_id:
            if lsa.lsa_seq >= self.lsa_seq:
                # a stale incarnation of ourselves is still circulating
                self.lsa_seq = lsa.lsa_seq
                self._originate_lsa()
            return
        view, changed = apply_lsa(self.routing.view, lsa, self.now())
        if changed:
            self._flood(lsa, arrival)
            self._install_view(view)

    def _on_subadv(self, ad: SubscriptionAd, arrival: str) -> None:
        if self.routing.apply_subadv(ad):
            self._flood(ad, arrival)

    # -- sessions ---------------------------------------------------------------

    def open_session(self, peer_kind: PeerKind = PeerKind.CLIENT, capacity: Optional[int] = None) -> Session:
        sid = next(self._session_ids)
        s = self.sessions[sid] = Session(sid, peer_kind, capacity or self.queue_capacity, self.now())
        return s

    def close_session(self, session: Session) -> None:
        for sub_id in list(session.subscriptions):
            self.unsubscribe(session, sub_id)
        session.closed = True
        self.sessions.pop(session.session_id, None)

    def subscribe(self, session: Session, sub: Subscription) -> bool:
        if session.closed:
            raise BrokerError("session closed")
        if sub.id in session.subscriptions:
            raise DuplicateSubscription(f"subscription {sub.id} already exists in session {session.session_id}")
        session.subscriptions[sub.id] = sub
        session.subscribed_at[sub.id] = self.now()
        if sub.qoi is QoI.CONFLATED:
            session.track_symbols = True
        self.index.add(session, sub)
        self._readvertise(sub.filter)
        if sub.qoi is QoI.CONFLATED:
            self._late_join(session)
        return True

    def unsubscribe(self, session: Session, sub_id: int) -> bool:
        sub = session.subscriptions.pop(sub_id, None)
        if sub is None:
            raise UnknownSubscription(f"no subscription {sub_id} in session {session.session_id}")
        session.subscribed_at.pop(sub_id, None)
        self.index.remove(session, sub)
        if not any(s.qoi is QoI.COMPLETE for s in session.subscriptions.values()):
            for rec in session.recovering.values():
                self.stats["recovery_abandoned"] += 1
            session.recovering.clear()
        self._readvertise()
        return True

    def _readvertise(self, added: Optional[SubscriptionFilter] = None) -> None:
        if added is not None and self.routing.advert_seq > 0:
            ad = advertise(self.routing, (), added)
        else:
            filters = [s.filter for sess in self.sessions.values() for s in sess.subscriptions.values()]
            ad = advertise(self.routing, filters)
        if ad is not None:
            self.stats["subadv_originated"] += 1
            self._flood(ad, None)

    def drain(self, session: Session, max_count: int) -> list[EventNotification]:
        return session.drain(max_count)

    @property
    def backpressured(self) -> bool:
        return any(s.staging for s in self.sessions.values())

    # -- data path ----------------------------------------------------------------

    def publish(self, n: EventNotification) -> None:
        """Ingest from an attached feed: store, deliver locally, forward."""
        if n.source not in self.local_sources:
            self.add_local_source(n.source)
        if self.store is not None:
            try:
                self.store.append(n)
            except DuplicateKey:
                self.stats["duplicate_publish"] += 1
                return
        self.ingest(n, LOCAL_FEED)

    def ingest(self, n: EventNotification, arrival: Optional[str] = LOCAL_FEED) -> None:
        self.stats["ingested"] += 1
        if arrival is LOCAL_FEED:
            expected = True
        else:
            link = self.links.get(arrival)
            if link is not None:
                link.keys.add(n.source, n.seq)
            if not self.seen.add(n.source, n.seq):
                self.stats["duplicate_arrival"] += 1
                return
            ingress = self.routing.ingress_of(n.source)
            if ingress is None:
                expected = True
            else:
                try:
                    expected = self.routing.tree(ingress).parent.get(self.node_id) == arrival
                except KeyError:
                    expected = False
            if not expected:
                self.stats["unexpected_arrival"] += 1
        self._deliver_local(n, expected)
        if expected:
            self._forward(n, arrival)

    def _deliver_local(self, n: EventNotification, direct: bool) -> None:
        hits = self.index.match(n)
        if not hits:
            return
        self.stats["matched"] += 1
        for session, complete in hits.items():
            if complete:
                if direct and n.source not in session.recovering:
                    session.enqueue_complete(n)
                else:
                    self._buffer(session, n)
            else:
                session.enqueue_conflated(n)

    def route(self, n: EventNotification, arrival: Optional[str]) -> list[str]:
        """Neighbour links that should carry ``n``; never the arrival link."""
        ingress = self.routing.ingress_of(n.source)
        links = self.links
        if ingress is None:
            return [p for p, l in links.items() if l.up and p != arrival]
        out = []
        for child, filters in self.routing.child_interest(ingress):
            if child == arrival:
                continue
            link = links.get(child)
            if link is None or not link.up:
                continue
            for f in filters:
                if filter_matches(f, n):
                    out.append(child)
                    break
        return out

    def _forward(self, n: EventNotification, arrival: Optional[str]) -> None:
        if not self.links:
            return
        msg = None
        for peer in self.route(n, arrival):
            if self.links[peer].keys.add(n.source, n.seq):
                if msg is None:
                    msg = Publish(n)
                self.stats["forwarded"] += 1
                self._send(peer, msg)
            else:
                self.stats["duplicate_suppressed"] += 1

    # -- recovery -------------------------------------------------------------------

    def _remote_sources(self) -> list[str]:
        ingress = self.routing.view.source_ingress()
        return sorted(s for s, b in ingress.items() if b != self.node_id)

    def _begin_recovery_all(self) -> None:
        sources = self._remote_sources()
        touched = False
        for session in self.sessions.values():
            has_complete = any(s.qoi is QoI.COMPLETE for s in session.subscriptions.values())
            has_conflated = any(s.qoi is QoI.CONFLATED for s in session.subscriptions.values())
            for source in sources:
                if has_complete:
                    rec = session.recovering.get(source)
                    if rec is None:
                        session.recovering[source] = _Recovery(session.dedupe_horizon.get(source))
                    else:
                        rec.req_id = None  # a reply to the old request may predate the change
                    touched = True
                if has_conflated:
                    self._latest_pending.setdefault(session.session_id, set()).add(source)
                    touched = True
        if touched:
            self._arm_settle(restart=True)

    def _buffer(self, session: Session, n: EventNotification) -> None:
        rec = session.recovering.get(n.source)
        if rec is None:
            rec = session.recovering[n.source] = _Recovery(session.dedupe_horizon.get(n.source))
            self._arm_settle(restart=False)
        rec.buffer.append(n)
        self.stats["buffered"] += 1

    def _arm_settle(self, restart: bool) -> None:
        if self._settle_armed and not restart:
            return
        self._settle_gen += 1
        self._settle_armed = True
        gen = self._settle_gen
        self._later(self.settle_ms, lambda: self._settled(gen))

    def _settled(self, gen: int) -> None:
        if gen != self._settle_gen or self.stopped:
            return
        self._settle_armed = False
        for session in list(self.sessions.values()):
            for source, rec in list(session.recovering.items()):
                if rec.req_id is None:
                    self._request(session, source, ResyncMode.AFTER_SEQ)
            for source in sorted(self._latest_pending.pop(session.session_id, ())):
                self._request(session, source, ResyncMode.LATEST)

    def _late_join(self, session: Session) -> None:
        """Fetch the current value of every symbol a new CONFLATED subscription covers."""
        ingress = self.routing.view.source_ingress()
        for source in sorted(ingress):
            if ingress[source] == self.node_id:
                if self.store is not None:
                    for n in self._latest_from_store(source, session.filters(QoI.CONFLATED)):
                        session.enqueue_conflated(n)
            else:
                self._request(session, source, ResyncMode.LATEST)

    def _request(self, session: Session, source: str, mode: ResyncMode) -> None:
        ingress = self.routing.ingress_of(source)
        rec = session.recovering.get(source) if mode is ResyncMode.AFTER_SEQ else None
        if ingress is None or ingress == self.node_id:
            if rec is not None:
                self._finish_recovery(session, source, None)
            return
        qoi = QoI.COMPLETE if mode is ResyncMode.AFTER_SEQ else QoI.CONFLATED
        filters = session.filters(qoi)
        if not filters:
            return
        req_id = next(self._req_ids)
        after_seq = after_ts = 0
        if rec is not None:
            rec.req_id = req_id
            if rec.horizon is not None:
                after_seq = rec.horizon
            else:
                after_ts = min(
                    (session.subscribed_at[i] for i, s in session.subscriptions.items() if s.qoi is qoi),
                    default=session.opened_ms,
                )
        self._requests[req_id] = (session.session_id, source, mode)
        msg = Resync(req_id, self.node_id, ingress, source, mode, filters, after_seq, after_ts)
        self.stats["resync_sent"] += 1
        self._unicast(msg, ingress)
        if mode is ResyncMode.AFTER_SEQ:
            self._later(RESYNC_TIMEOUT_MS, lambda: self._request_timeout(req_id))

    def _request_timeout(self, req_id: int) -> None:
        req = self._requests.pop(req_id, None)
        if req is None or self.stopped:
            return
        sid, source, mode = req
        session = self.sessions.get(sid)
        if session is None:
            return
        rec = session.recovering.get(source)
        if rec is not None and rec.req_id == req_id:
            self.stats["resync_retry"] += 1
            rec.req_id = None
            self._request(session, source, mode)

    def _unicast(self, msg: Resync | Replay, target: str) -> None:
        hop = next_hop(self.routing.view, target)
        link = self.links.get(hop) if hop is not None else None
        if link is None or not link.up:
            self.stats["unroutable"] += 1
            return
        self._send(hop, msg)

    def _latest_from_store(self, source: str, filters) -> list[EventNotification]:
        def pred(n):
            return n.source == source and any(filter_matches(f, n) for f in filters)

        out = []
        for sym in sorted(self.store.symbols()):
            n = self.store.latest_where(sym, pred)
            if n is not None:
                out.append(n)
        return out

    def _on_resync(self, msg: Resync) -> None:
        if msg.target != self.node_id:
            self._unicast(msg, msg.target)
            return
        self.stats["resync_served"] += 1
        if self.store is None:
            reply = Replay(msg.req_id, self.node_id, msg.requester, False, 0)
        elif msg.mode is ResyncMode.AFTER_SEQ:
            items = tuple(
                n
                for n in self.store.replay_source(msg.source, _ANY, msg.after_seq, msg.after_ts)
                if any(filter_matches(f, n) for f in msg.filters)
            )
            reply = Replay(msg.req_id, self.node_id, msg.requester, True, self.store.last_seq(msg.source), items)
        else:
            items = tuple(self._latest_from_store(msg.source, msg.filters))
            reply = Replay(msg.req_id, self.node_id, msg.requester, True, self.store.last_seq(msg.source), items)
        self._unicast(reply, msg.requester)

    def _on_replay(self, msg: Replay) -> None:
        if msg.target != self.node_id:
            self._unicast(msg, msg.target)
            return
        req = self._requests.pop(msg.req_id, None)
        if req is None:
            return
        sid, source, mode = req
        session = self.sessions.get(sid)
        if session is None:
            return
        if mode is ResyncMode.LATEST:
            for n in msg.notifications:
                if session.wants(n, QoI.CONFLATED):
                    session.enqueue_conflated(n)
            return
        rec = session.recovering.get(source)
        if rec is None or rec.req_id != msg.req_id:
            return
        self.stats["replayed"] += len(msg.notifications)
        self._finish_recovery(session, source, msg.notifications if msg.available else None)

    def _finish_recovery(self, session: Session, source: str, replayed) -> None:
        rec = session.recovering.pop(source)
        for n in sorted(replayed or (), key=lambda n: n.seq):
            if session.wants(n, QoI.COMPLETE):
                session.enqueue_complete(n)
        for n in sorted(rec.buffer, key=lambda n: n.seq):
            session.enqueue_complete(n)

    def recovery_pending(self) -> bool:
        """True while a recovery could still make progress (its ingress is reachable)."""
        if self._settle_armed:
            return True
        view = self.routing.view
        for s in self.sessions.values():
            for source in s.recovering:
                ingress = self.routing.ingress_of(source)
                if ingress is not None and next_hop(view, ingress) is not None:
                    return True
        return False

    # -- message dispatch -----------------------------------------------------------

    def receive(self, peer: str, msg: Message) -> None:
        """Handle one message from neighbour ``peer``."""
        if self.stopped:
            return
        link = self.links.get(peer)
        if isinstance(msg, Hello):
            if link is None:
                link = self.links[peer] = Link(peer, keys=KeyWindow(self.dedupe_window))
            if link.up:
                # the peer reconnected behind our back: anything in flight is gone
                self._link_down(link)
            if not link.hello_sent:
                link.hello_sent = True
                self._send(peer, Hello(self.node_id, PeerKind.NEIGHBOR_BROKER, self.site))
            self._link_up(link)
            return
        if link is None:
            return
        if not link.up:
            if not link.hello_sent:
                link.hello_sent = True
                self._send(peer, Hello(self.node_id, PeerKind.NEIGHBOR_BROKER, self.site))
            return
        link.last_heard = self.now()
        if isinstance(msg, Publish):
            self.ingest(msg.notification, peer)
        elif isinstance(msg, LinkStateAd):
            self._on_lsa(msg, peer)
        elif isinstance(msg, SubscriptionAd):
            self._on_subadv(msg, peer)
        elif isinstance(msg, Heartbeat):
            pass
        elif isinstance(msg, Resync):
            self._on_resync(msg)
        elif isinstance(msg, Replay):
            self._on_replay(msg)
        elif isinstance(msg, Credit):
            pass
        else:
            log.debug("%s: ignoring %s from %s", self.node_id, type(msg).__name__, peer)


_ANY = SubscriptionFilter()
