"""System-wide checks over a run's event log, with brute-force oracles.

Every check works from the raw log plus the scenario, never from broker
internals, so a broken broker cannot vouch for itself.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass
from typing import Optional

from ..broker import HEARTBEAT_MS, LIVENESS_CHECK_MS, MISSED_HEARTBEATS, RESYNC_SETTLE_MS
from ..model import EventType, InstrumentClass, QoI, SymbolKey, filter_matches, parse_filter_expr
from .report import MetricsReport
from .scenario import Scenario

MAX_DETAILS = 5  # missing items named per subscriber and source
DETECT_MS = MISSED_HEARTBEATS * HEARTBEAT_MS + LIVENESS_CHECK_MS


@dataclass(frozen=True)
class Violation:
    check: str
    subject: str
    detail: str

    def __str__(self) -> str:
        return f"{self.check}: {self.subject}: {self.detail}"


class _Note:
    """The attributes filters look at, rebuilt from a PUB log line."""

    __slots__ = ("t", "broker", "source", "seq", "symbol", "event_type", "instrument_class")

    def __init__(self, t, broker, source, seq, symbol, etype, iclass):
        self.t = t
        self.broker = broker
        self.source = source
        self.seq = seq
        self.symbol = SymbolKey.parse(symbol)
        self.event_type = EventType[etype]
        self.instrument_class = InstrumentClass[iclass]


@dataclass
class _Sub:
    id: str
    broker: str
    qoi: QoI
    filter: object
    start: int
    stop: Optional[int] = None  # unsubscribe or crash of its broker
    crashed: bool = False


class EventLog:
    def __init__(self, lines: list[str]):
        self.pubs: dict[tuple[str, int], _Note] = {}
        self.pub_order: list[_Note] = []
        self.xmits: list[tuple[int, str, str, str, int]] = []
        self.delivers: dict[str, list[tuple[int, str, int, str]]] = {}
        self.subs: dict[str, _Sub] = {}
        self.topology: list[tuple[int, str, tuple[str, ...]]] = []
        self.crashes: dict[str, int] = {}
        for line in lines:
            parts = line.split(" ", 2)
            t, kind, rest = int(parts[0]), parts[1], parts[2] if len(parts) > 2 else ""
            f = rest.split()
            if kind == "PUB":
                n = _Note(t, f[0], f[1], int(f[2]), f[3], f[4], f[5])
                self.pubs[(n.source, n.seq)] = n
                self.pub_order.append(n)
            elif kind == "XMIT":
                if f[2] == "PUB":
                    self.xmits.append((t, f[0], f[1], f[3], int(f[4])))
            elif kind == "DELIVER":
                self.delivers.setdefault(f[0], []).append((t, f[1], int(f[2]), f[3]))
            elif kind == "SUB":
                toks = shlex.split(rest)
                self.subs[toks[0]] = _Sub(toks[0], toks[1], QoI[toks[2]], parse_filter_expr(toks[3]), t)
                self.delivers.setdefault(toks[0], [])
            elif kind == "UNSUB":
                self.subs[f[0]].stop = t
            elif kind == "LINK":
                self.topology.append((t, f[2], (f[0], f[1])))
            elif kind == "CRASH":
                self.crashes[f[0]] = t
                self.topology.append((t, "crash", (f[0],)))
                for s in self.subs.values():
                    if s.broker == f[0] and s.stop is None:
                        s.stop = t
                        s.crashed = True


def _links_at(sc: Scenario, log: EventLog, t: float) -> dict[str, set[str]]:
    """Adjacency of live links at time ``t`` (inclusive), from the log."""
    up = {k: True for k in sc.links}
    dead: set[str] = set()
    for when, action, args in log.topology:
        if when > t:
            break
        if action == "crash":
            dead.add(args[0])
        else:
            up[tuple(sorted(args))] = action == "up"
    adj: dict[str, set[str]] = {b: set() for b in sc.brokers if b not in dead}
    for (a, b), is_up in up.items():
        if is_up and a not in dead and b not in dead:
            adj[a].add(b)
            adj[b].add(a)
    return adj


def _reachable(adj: dict[str, set[str]], start: str, banned: Optional[str] = None) -> set[str]:
    if start not in adj:
        return set()
    seen, stack = {start}, [start]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt != banned and nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def oracle_tree(sc: Scenario, root: str) -> dict[str, str]:
    """Parent map of the shortest-path tree, by Floyd-Warshall and smallest-id parent."""
    nodes = sorted(sc.brokers)
    inf = float("inf")
    d = {a: {b: (0 if a == b else inf) for b in nodes} for a in nodes}
    for l in sc.links.values():
        d[l.a][l.b] = d[l.b][l.a] = min(d[l.a][l.b], l.latency_ms)
    for k in nodes:
        for i in nodes:
            dik = d[i][k]
            if dik == inf:
                continue
            for j in nodes:
                if dik + d[k][j] < d[i][j]:
                    d[i][j] = dik + d[k][j]
    adj = sc.neighbors()
    parent = {}
    for v in nodes:
        if v == root or d[root][v] == inf:
            continue
        parent[v] = min(u for u, w in adj[v].items() if d[root][u] + w == d[root][v])
    return parent


def _link_name(a: str, b: str) -> str:
    return f"{a}-{b}" if a < b else f"{b}-{a}"


def _faulty(sc: Scenario) -> bool:
    return bool(sc.events)


def _stored(sc: Scenario, broker: str) -> bool:
    return sc.brokers[broker].store is not None


def _cut_short(sc: Scenario, log: EventLog, sub: _Sub, t_pub: int) -> bool:
    """True if ``sub`` ended before a recovery covering ``t_pub`` could finish.

    A failure is only noticed after the missed-heartbeat deadline, and live
    items are held back while a recovery settles, so each change casts a
    shadow well past its own timestamp.
    """
    if sub.stop is None:
        return False
    grace = sc.grace_ms()
    for when, action, _ in log.topology:
        if when >= sub.stop:
            break
        detect = DETECT_MS if action in ("down", "crash") else 0
        done = when + detect + RESYNC_SETTLE_MS + 2 * grace
        if when - grace <= t_pub < done and sub.stop < done:
            return True
    return False


def check_complete(sc: Scenario, log: EventLog, sub: _Sub, end_t: int) -> list[Violation]:
    out = []
    grace = sc.grace_ms()
    delivered: dict[str, list[int]] = {}
    for _, source, seq, _ in log.delivers.get(sub.id, ()):
        n = log.pubs.get((source, seq))
        if n is None:
            out.append(Violation("complete", sub.id, f"delivered unknown notification ({source}, {seq})"))
            continue
        if not filter_matches(sub.filter, n):
            out.append(Violation("complete", sub.id, f"delivered non-matching ({source}, {seq})"))
        seqs = delivered.setdefault(source, [])
        if seqs and seq <= seqs[-1]:
            what = "duplicate" if seq in seqs else "out of order"
            out.append(Violation("complete", sub.id, f"{what} delivery ({source}, {seq}) after {seqs[-1]}"))
        seqs.append(seq)

    window_end = sub.stop if sub.stop is not None else end_t
    adj_end = _links_at(sc, log, window_end)
    matching: dict[str, list[_Note]] = {}
    for n in log.pub_order:
        if filter_matches(sub.filter, n):
            matching.setdefault(n.source, []).append(n)
    for source, notes in sorted(matching.items()):
        ingress = notes[0].broker
        if _faulty(sc) and not _stored(sc, ingress):
            continue  # no store to recover from: only order and soundness are promised
        got = set(delivered.get(source, ()))
        seqs = [n.seq for n in notes]
        missing = []
        lo_t = sub.start + grace
        if got:
            # gaps inside the delivered range count, except during the join transient
            first, hi = min(got), max(got)
            missing += [n.seq for n in notes if first <= n.seq <= hi and n.seq not in got and n.t >= lo_t]
        hi_t = (sub.stop - grace) if sub.stop is not None else float("inf")
        if ingress in log.crashes:
            hi_t = min(hi_t, log.crashes[ingress] - grace)
        if sub.broker in _reachable(adj_end, ingress):
            missing += [n.seq for n in notes if lo_t <= n.t < hi_t and n.seq not in got and n.seq not in missing
                        and not _cut_short(sc, log, sub, n.t)]
        for seq in sorted(set(missing))[:MAX_DETAILS]:
            out.append(Violation("complete", sub.id, f"missing ({source}, {seq})"))
        if len(set(missing)) > MAX_DETAILS:
            out.append(Violation("complete", sub.id, f"{len(set(missing)) - MAX_DETAILS} more missing from {source}"))
    return out


def check_conflated(sc: Scenario, log: EventLog, sub: _Sub, end_t: int) -> list[Violation]:
    out = []
    grace = sc.grace_ms()
    last: dict[SymbolKey, int] = {}
    for _, source, seq, _ in log.delivers.get(sub.id, ()):
        n = log.pubs.get((source, seq))
        if n is None:
            out.append(Violation("conflated", sub.id, f"delivered unknown notification ({source}, {seq})"))
            continue
        if not filter_matches(sub.filter, n):
            out.append(Violation("conflated", sub.id, f"delivered non-matching ({source}, {seq})"))
        prev = last.get(n.symbol)
        if prev is not None and seq <= prev:
            out.append(Violation("conflated", sub.id, f"stale value for {n.symbol}: seq {seq} after {prev}"))
        last[n.symbol] = seq
    if sub.stop is not None:
        return out
    adj_end = _links_at(sc, log, end_t)
    reach = _reachable(adj_end, sub.broker)
    want: dict[SymbolKey, _Note] = {}
    for n in log.pub_order:
        if filter_matches(sub.filter, n):
            want[n.symbol] = n
    for sym in sorted(want):
        n = want[sym]
        if n.broker not in reach:
            continue
        if not _stored(sc, n.broker) and (_faulty(sc) or n.t < sub.start + grace):
            continue
        if last.get(sym) != n.seq:
            out.append(Violation("conflated", sub.id,
                                 f"last value for {sym} is seq {last.get(sym)}, last published {n.seq}"))
    return out


def _interest_ends(log: EventLog, sub: _Sub) -> int:
    """When the rest of the mesh can last believe in ``sub``'s interest.

    An unsubscribe behind a failure nobody has detected yet cannot be
    advertised, so the old interest stands until the failure is noticed.
    """
    end = sub.stop
    for when, action, _ in log.topology:
        if when > sub.stop:
            break
        if action in ("down", "crash") and sub.stop < when + DETECT_MS:
            end = max(end, when + DETECT_MS)
    return end


def check_links(sc: Scenario, log: EventLog, end_t: int) -> list[Violation]:
    out = []
    grace = sc.grace_ms()
    copies: dict[tuple[str, int, str], int] = {}
    full = {b: set(peers) for b, peers in sc.neighbors().items()}
    beyond: dict[tuple[str, str], set[str]] = {}
    for t, a, b, source, seq in log.xmits:
        name = _link_name(a, b)
        key = (source, seq, name)
        copies[key] = copies.get(key, 0) + 1
        if copies[key] == 2:
            out.append(Violation("link-copy", name, f"({source}, {seq}) crossed more than once"))
        n = log.pubs.get((source, seq))
        if n is None:
            out.append(Violation("interest", name, f"carried unknown ({source}, {seq})"))
            continue
        side = beyond.get((a, b))
        if side is None:
            side = beyond[(a, b)] = _reachable(full, b, banned=a)
        interested = any(
            s.broker in side
            and s.start <= t
            and (s.stop is None or t <= _interest_ends(log, s) + grace)
            and filter_matches(s.filter, n)
            for s in log.subs.values()
        )
        if not interested:
            out.append(Violation("interest", name, f"{a}->{b} carried ({source}, {seq}) with no subscriber beyond"))
    return out


def check_fanout(sc: Scenario, log: EventLog) -> list[Violation]:
    """Static topologies only: each notification crosses exactly its oracle subtree."""
    out = []
    grace = sc.grace_ms()
    trees = {}
    crossed: dict[tuple[str, int], set[str]] = {}
    for _, a, b, source, seq in log.xmits:
        crossed.setdefault((source, seq), set()).add(_link_name(a, b))
    subs = list(log.subs.values())
    for n in log.pub_order:
        ambiguous = False
        members = set()
        for s in subs:
            if not filter_matches(s.filter, n):
                continue
            # interest that changes while n is in flight may or may not be honoured
            if abs(n.t - s.start) < grace or (s.stop is not None and abs(n.t - s.stop) < grace):
                ambiguous = True
                break
            if s.start + grace <= n.t and (s.stop is None or n.t < s.stop):
                members.add(s.broker)
        if ambiguous:
            continue
        parent = trees.get(n.broker)
        if parent is None:
            parent = trees[n.broker] = oracle_tree(sc, n.broker)
        want = set()
        for m in members:
            while m != n.broker and m in parent:
                want.add(_link_name(m, parent[m]))
                m = parent[m]
        got = crossed.get((n.source, n.seq), set())
        if got != want:
            extra, lacking = sorted(got - want), sorted(want - got)
            out.append(Violation("fanout", f"{n.source}/{n.seq}",
                                 f"crossed {sorted(got)}, oracle subtree {sorted(want)} "
                                 f"(extra {extra}, lacking {lacking})"))
    return out


def check_conservation(report: MetricsReport) -> list[Violation]:
    out = []
    if not report.quiescent:
        out.append(Violation("liveness", "run", f"not quiescent {report.quiesced_ms - report.end_ms} ms after end"))
    for f in report.feeds.values():
        if f.parsed != f.accepted + f.rejected_total:
            out.append(Violation("conservation", f.id,
                                 f"parsed {f.parsed} != accepted {f.accepted} + rejected {f.rejected_total}"))
    for s in report.subscribers.values():
        if s.qoi == "CONFLATED" and s.matched != s.delivered + s.dropped_superseded and report.quiescent:
            out.append(Violation("conservation", s.id,
                                 f"matched {s.matched} != delivered {s.delivered} + superseded {s.dropped_superseded}"))
        if s.qoi == "COMPLETE" and s.matched != s.delivered and report.quiescent:
            out.append(Violation("conservation", s.id, f"matched {s.matched} != delivered {s.delivered}"))
    return out


def verify(report: Optional[MetricsReport], scenario: Scenario, lines: list[str]) -> list[Violation]:
    """All checks; an empty list means the run upheld every invariant."""
    log = EventLog(lines)
    end_t = int(lines[-1].split(" ", 1)[0]) if lines else scenario.end_ms
    if report is not None:
        end_t = max(end_t, report.quiesced_ms)
    out: list[Violation] = []
    crashed_subs = {s.id for s in log.subs.values() if s.crashed}
    for sid in sorted(log.subs):
        sub = log.subs[sid]
        if sub.qoi is QoI.COMPLETE:
            out += check_complete(scenario, log, sub, end_t)
        else:
            out += check_conflated(scenario, log, sub, end_t)
    out += check_links(scenario, log, end_t)
    if scenario.static:
        out += check_fanout(scenario, log)
    if report is not None:
        out += [v for v in check_conservation(report) if v.subject not in crashed_subs]
    return out
