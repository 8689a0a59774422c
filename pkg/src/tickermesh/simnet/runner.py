"""Discrete-event execution of a scenario over embedded brokers and simulated links."""

from __future__ import annotations

import heapq
import itertools
import logging
import tempfile
from pathlib import Path
from typing import Callable, Optional

from ..broker import Broker, Session
from ..feedpipe import FeedConfig
from ..model import EventNotification, Subscription
from ..plant import TickerPlant
from ..store import EventStore
from ..synth import SyntheticFeed
from ..wire import (
    Credit,
    Heartbeat,
    Hello,
    LinkStateAd,
    Publish,
    Replay,
    Resync,
    SubscriptionAd,
    decode_message,
    encode_message,
)
from .report import FeedMetrics, LinkMetrics, MetricsReport, Reconvergence, SubscriberMetrics
from .scenario import LinkSpec, Scenario

log = logging.getLogger(__name__)

DRAIN_TICK_MS = 10
PROBE_MS = 10
QUIESCENCE_STEP_MS = 100
QUIESCENCE_CAP_MS = 120_000
RECONVERGENCE_CAP_MS = 60_000

_KIND = {
    Publish: "PUB",
    Replay: "REPLAY",
    Resync: "RESYNC",
    Hello: "HELLO",
    LinkStateAd: "LSA",
    SubscriptionAd: "SUBADV",
    Heartbeat: "HEARTBEAT",
    Credit: "CREDIT",
}
_DATA = frozenset(("PUB", "REPLAY", "RESYNC"))


class EventLoop:
    """Timers ordered by (time, insertion order); time is integer milliseconds."""

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._order = itertools.count()

    def call_at(self, t: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(t, self.now), next(self._order), fn))

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> None:
        self.call_at(self.now + max(0, int(delay_ms)), fn)

    def run_until(self, t: int) -> None:
        heap = self._heap
        while heap and heap[0][0] <= t:
            when, _, fn = heapq.heappop(heap)
            self.now = when
            fn()
        self.now = t


class _Link:
    def __init__(self, spec: LinkSpec, inter_site: bool):
        self.spec = spec
        self.up = True
        self.epoch = 0
        self.free_us = {spec.a: 0, spec.b: 0}
        self.metrics = LinkMetrics(f"{spec.key[0]}-{spec.key[1]}", inter_site)


class _Net:
    """Transport handed to one embedded broker."""

    def __init__(self, sim: Simulation, node: str):
        self.sim = sim
        self.node = node

    def now(self) -> int:
        return self.sim.loop.now

    def send(self, peer: str, msg) -> None:
        self.sim.transmit(self.node, peer, msg)

    def call_later(self, delay_ms: int, fn) -> None:
        sim, node = self.sim, self.node

        def fire():
            if node not in sim.crashed:
                fn()

        sim.loop.call_later(delay_ms, fire)


class _FeedDriver:
    def __init__(self, sim: Simulation, spec):
        self.sim = sim
        self.spec = spec
        self.synth = SyntheticFeed(spec.source, spec.symbols, f"{sim.scenario.seed}:{spec.seed}",
                                   spec.trade_pct, spec.bad_pct)
        self.plant = TickerPlant(FeedConfig(spec.id, spec.source))
        self.k = 0
        self.shift = 0
        self.stop_ms = spec.stop_ms if spec.stop_ms is not None else sim.scenario.end_ms
        self.metrics = FeedMetrics(spec.id, spec.source, spec.broker)

    def due(self, k: int) -> int:
        return self.spec.start_ms + self.shift + (k * 1000) // self.spec.rate

    def tick(self) -> None:
        sim = self.sim
        now = sim.loop.now
        if now >= self.stop_ms or self.spec.broker in sim.crashed:
            return
        broker = sim.brokers[self.spec.broker]
        if broker.backpressured:
            # a COMPLETE consumer at this broker is behind: hold the feed
            self.shift += DRAIN_TICK_MS
            self.metrics.paused_ms += DRAIN_TICK_MS
            sim.loop.call_later(DRAIN_TICK_MS, self.tick)
            return
        while self.due(self.k) <= now:
            self.k += 1
            self.emit(broker, now)
        sim.loop.call_at(self.due(self.k), self.tick)

    def emit(self, broker: Broker, now: int) -> None:
        line, _ = self.synth.next_line(now)
        n = self.plant.feed_line(line, now)
        if n is None:
            return
        self.metrics.published += 1
        self.sim.record(
            f"{now} PUB {broker.node_id} {n.source} {n.seq} {n.symbol.rendered} "
            f"{n.event_type.name} {n.instrument_class.name}"
        )
        broker.publish(n)

    def finish(self) -> None:
        st = self.plant.stats
        m = self.metrics
        m.parsed, m.accepted = st.parsed, st.accepted
        m.rejected = {r.value: c for r, c in sorted(st.rejected.items(), key=lambda kv: kv[0].value)}
        m.derived = len(self.plant.derived)


class _SubDriver:
    def __init__(self, sim: Simulation, spec):
        self.sim = sim
        self.spec = spec
        self.session: Optional[Session] = None
        self.budget = 0
        self.done = False
        self.metrics = SubscriberMetrics(spec.id, spec.broker, spec.qoi.name)
        self.planted_duplicate = ("duplicate_delivery", spec.id) in sim.scenario.selftest

    @property
    def broker(self) -> Broker:
        return self.sim.brokers[self.spec.broker]

    def start(self) -> None:
        if self.spec.broker in self.sim.crashed:
            self.done = True
            return
        self.session = self.broker.open_session()
        self.sim.record(
            f'{self.sim.loop.now} SUB {self.spec.id} {self.spec.broker} {self.spec.qoi.name} '
            f'"{self.spec.filter_text}"'
        )
        self.broker.subscribe(self.session, Subscription(1, self.spec.filter, self.spec.qoi))
        self.sim.loop.call_later(DRAIN_TICK_MS, self.tick)

    def _deliver(self, items: list[EventNotification]) -> None:
        now = self.sim.loop.now
        lat = self.metrics.latencies
        for n in items:
            self.sim.record(f"{now} DELIVER {self.spec.id} {n.source} {n.seq} {n.symbol.rendered}")
            lat.append(now - n.ingest_ts_ms)
            if self.planted_duplicate:
                self.planted_duplicate = False
                self.sim.record(f"{now} DELIVER {self.spec.id} {n.source} {n.seq} {n.symbol.rendered}")

    def tick(self) -> None:
        if self.done or self.spec.broker in self.sim.crashed:
            return
        sim = self.sim
        if sim.loop.now >= sim.scenario.end_ms:
            take = self.session.pending
        else:
            self.budget = min(self.budget + self.spec.drain * DRAIN_TICK_MS, max(self.spec.drain, 1) * 1000)
            take = self.budget // 1000
            self.budget -= take * 1000
        if take:
            self._deliver(self.broker.drain(self.session, take))
        sim.loop.call_later(DRAIN_TICK_MS, self.tick)

    def snapshot(self) -> None:
        s = self.session
        if s is None:
            return
        m = self.metrics
        m.matched, m.delivered = s.matched, s.delivered
        m.dropped_superseded, m.discarded = s.dropped_superseded, s.discarded

    def stop(self) -> None:
        if self.done or self.session is None:
            return
        if self.spec.broker not in self.sim.crashed:
            # the consumer reads what is already queued before leaving
            self._deliver(self.broker.drain(self.session, self.session.pending))
            self.snapshot()
            self.broker.close_session(self.session)
        self.sim.record(f"{self.sim.loop.now} UNSUB {self.spec.id}")
        self.done = True

    def crashed(self) -> None:
        if not self.done:
            self.snapshot()
            self.done = True


class Simulation:
    def __init__(self, scenario: Scenario, *, wire: bool = False, store_root: str | Path | None = None):
        self.scenario = scenario
        self.wire = wire
        self.store_root = Path(store_root) if store_root is not None else None
        self.loop = EventLoop()
        self.crashed: set[str] = set()
        self.log: list[str] = []
        self.inflight = 0
        self.brokers: dict[str, Broker] = {}
        self.links: dict[tuple[str, str], _Link] = {}
        self.feeds: list[_FeedDriver] = []
        self.subs: list[_SubDriver] = []
        self._pending_reconv: list[Reconvergence] = []
        self.reconvergence: list[Reconvergence] = []
        self._probing = False

    def record(self, line: str) -> None:
        self.log.append(line)

    # -- transport ---------------------------------------------------------------

    def transmit(self, a: str, b: str, msg) -> None:
        link = self.links[(a, b) if a < b else (b, a)]
        kind = _KIND[type(msg)]
        if not link.up or a in self.crashed or b in self.crashed:
            link.metrics.dropped += 1
            return
        link.metrics.counts[kind] += 1
        now = self.loop.now
        if kind == "PUB":
            n = msg.notification
            self.record(f"{now} XMIT {a} {b} PUB {n.source} {n.seq}")
        elif kind == "REPLAY":
            self.record(f"{now} XMIT {a} {b} REPLAY {len(msg.notifications)}")
        if self.wire:
            msg = decode_message(encode_message(msg))
        spec = link.spec
        service_us = max(1, 1_000_000 // spec.bandwidth_mps)
        depart_us = max(now * 1000, link.free_us[a]) + service_us
        link.free_us[a] = depart_us
        arrive = -(-depart_us // 1000) + spec.latency_ms
        epoch = link.epoch
        data = kind in _DATA
        if data:
            self.inflight += 1

        def deliver():
            if data:
                self.inflight -= 1
            if link.epoch != epoch or b in self.crashed:
                link.metrics.dropped += 1
                return
            self.brokers[b].receive(a, msg)

        self.loop.call_at(arrive, deliver)

    # -- faults ------------------------------------------------------------------

    def _set_link(self, a: str, b: str, up: bool) -> None:
        link = self.links[(a, b) if a < b else (b, a)]
        self.record(f"{self.loop.now} LINK {link.spec.key[0]} {link.spec.key[1]} {'up' if up else 'down'}")
        if link.up == up:
            return
        link.up = up
        link.epoch += 1
        if up:
            now_us = self.loop.now * 1000
            link.free_us = {k: now_us for k in link.free_us}
            x, y = link.spec.a, link.spec.b
            if x not in self.crashed and y not in self.crashed:
                self.brokers[x].connect(y, link.spec.latency_ms)
                self.brokers[y].connect(x, link.spec.latency_ms)
        self._start_probe(f"link_{'up' if up else 'down'} {link.metrics.name}")

    def _crash(self, broker_id: str) -> None:
        if broker_id in self.crashed:
            return
        self.record(f"{self.loop.now} CRASH {broker_id}")
        self.crashed.add(broker_id)
        self.brokers[broker_id].stop()
        for link in self.links.values():
            if broker_id in link.free_us:
                link.epoch += 1
        for s in self.subs:
            if s.spec.broker == broker_id:
                s.crashed()
        self._start_probe(f"crash {broker_id}")

    # -- convergence probe ------------------------------------------------------------

    def truth_edges(self) -> set[tuple[str, str, int]]:
        return {
            (l.spec.key[0], l.spec.key[1], l.spec.latency_ms)
            for l in self.links.values()
            if l.up and l.spec.a not in self.crashed and l.spec.b not in self.crashed
        }

    def converged(self) -> bool:
        truth = self.truth_edges()
        adj: dict[str, set[str]] = {}
        for a, b, _ in truth:
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        for bid, broker in self.brokers.items():
            if bid in self.crashed:
                continue
            comp, stack = {bid}, [bid]
            while stack:
                for nxt in adj.get(stack.pop(), ()):
                    if nxt not in comp:
                        comp.add(nxt)
                        stack.append(nxt)
            want = {e for e in truth if e[0] in comp}
            got = {e for e in broker.routing.view.edges() if e[0] in comp or e[1] in comp}
            if want != got:
                return False
        return True

    def _start_probe(self, action: str) -> None:
        self._pending_reconv.append(Reconvergence(self.loop.now, action, None))
        if not self._probing:
            self._probing = True
            self.loop.call_later(PROBE_MS, self._probe)

    def _probe(self) -> None:
        now = self.loop.now
        if self.converged():
            for r in self._pending_reconv:
                r.ms = now - r.t_ms
            self.reconvergence += self._pending_reconv
            self._pending_reconv = []
            self._probing = False
            return
        expired = [r for r in self._pending_reconv if now - r.t_ms > RECONVERGENCE_CAP_MS]
        if expired:
            self.reconvergence += expired
            self._pending_reconv = [r for r in self._pending_reconv if r not in expired]
        if self._pending_reconv:
            self.loop.call_later(PROBE_MS, self._probe)
        else:
            self._probing = False

    # -- run ---------------------------------------------------------------------

    def _setup(self, store_dir: Optional[Path]) -> None:
        sc = self.scenario
        for spec in sc.brokers.values():
            store = None
            if spec.store == "mem":
                store = EventStore()
            elif spec.store == "dir":
                store = EventStore(store_dir / spec.id)
            self.brokers[spec.id] = Broker(spec.id, spec.site, _Net(self, spec.id), store=store)
        for key, spec in sc.links.items():
            self.links[key] = _Link(spec, sc.site_of(spec.a) != sc.site_of(spec.b))
        for f in sc.feeds.values():
            self.brokers[f.broker].local_sources.add(f.source)
        for b in self.brokers.values():
            b.start()
        for spec in sc.links.values():
            self.brokers[spec.a].connect(spec.b, spec.latency_ms)
            self.brokers[spec.b].connect(spec.a, spec.latency_ms)
        for f in sc.feeds.values():
            d = _FeedDriver(self, f)
            self.feeds.append(d)
            self.loop.call_at(f.start_ms, d.tick)
        for s in sc.subs.values():
            d = _SubDriver(self, s)
            self.subs.append(d)
            self.loop.call_at(s.start_ms, d.start)
            if s.stop_ms is not None:
                self.loop.call_at(s.stop_ms, d.stop)
        for ev in sc.events:
            if ev.action == "link_down":
                self.loop.call_at(ev.t_ms, lambda a=ev.args: self._set_link(a[0], a[1], False))
            elif ev.action == "link_up":
                self.loop.call_at(ev.t_ms, lambda a=ev.args: self._set_link(a[0], a[1], True))
            else:
                self.loop.call_at(ev.t_ms, lambda a=ev.args: self._crash(a[0]))

    def quiescent(self) -> bool:
        if self.inflight or self._pending_reconv:
            return False
        for s in self.subs:
            if s.session is not None and not s.done and s.session.pending:
                return False
        for bid, b in self.brokers.items():
            if bid not in self.crashed and b.recovery_pending():
                return False
        return True

    def run(self) -> MetricsReport:
        sc = self.scenario
        if self.store_root is None and any(b.store == "dir" for b in sc.brokers.values()):
            with tempfile.TemporaryDirectory(prefix="simnet-") as tmp:
                return self._run(Path(tmp))
        return self._run(self.store_root)

    def _run(self, store_dir: Optional[Path]) -> MetricsReport:
        sc = self.scenario
        self._setup(store_dir)
        self.loop.run_until(sc.end_ms)
        t = sc.end_ms
        quiet = False
        while t < sc.end_ms + QUIESCENCE_CAP_MS:
            t += QUIESCENCE_STEP_MS
            self.loop.run_until(t)
            if self.quiescent():
                quiet = True
                break
        for b in self.brokers.values():
            if b.store is not None:
                b.store.close()
        return self._report(t, quiet)

    def _report(self, t: int, quiet: bool) -> MetricsReport:
        from .verify import verify

        sc = self.scenario
        rep = MetricsReport(sc.seed, sc.end_ms, t, quiet)
        for link in sorted(self.links.values(), key=lambda l: l.metrics.name):
            rep.links[link.metrics.name] = link.metrics
        for d in self.feeds:
            d.finish()
            rep.feeds[d.spec.id] = d.metrics
        for d in self.subs:
            if not d.done:
                d.snapshot()
            rep.subscribers[d.spec.id] = d.metrics
        rep.reconvergence = sorted(self.reconvergence + self._pending_reconv, key=lambda r: (r.t_ms, r.action))
        rep.event_log = self.log
        violations = verify(rep, sc, self.log)
        rep.violations = [str(v) for v in violations]
        failed = {v.subject for v in violations}
        for s in rep.subscribers.values():
            s.verdict = "FAIL" if s.id in failed else "PASS"
        return rep


def run(scenario: Scenario, *, wire: bool = False, store_root: str | Path | None = None) -> MetricsReport:
    """Execute ``scenario``; the full event log is on ``report.event_log``."""
    return Simulation(scenario, wire=wire, store_root=store_root).run()
