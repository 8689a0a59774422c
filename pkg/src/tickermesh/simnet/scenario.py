"""Scenario files: one directive per line, ``#`` starts a comment.

::

    site <id>
    broker <id> site=<id> [store=mem|dir]
    link <a> <b> latency_ms=<n> bandwidth_mps=<n>
    feed <id> broker=<id> source=<NAME> symbols=<n> rate=<n> seed=<n> trade_pct=<0..100>
         [start=<ms>] [stop=<ms>] [bad_pct=<0..100>]
    sub <id> broker=<id> qoi=CONFLATED|COMPLETE filter="<expr>" drain=<n> [start=<ms>] [stop=<ms>]
    at <t_ms> link_down <a> <b> | link_up <a> <b> | crash <broker>
    end <t_ms>
    seed <n>
    selftest duplicate_delivery <sub>

``selftest`` plants a known bug in the run (the named subscriber sees its
first delivery twice) so the verifier itself can be tested end to end.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from typing import Optional

from ..model import FilterSyntaxError, QoI, SubscriptionFilter, parse_filter_expr

FEED_START_MS = 1_000
SELFTEST_BUGS = ("duplicate_delivery",)
_ID_RE = re.compile(r"[A-Za-z0-9_.-]{1,32}")
_SOURCE_RE = re.compile(r"[A-Z0-9]{1,8}")


class ScenarioError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


class ScenarioReferenceError(ScenarioError):
    def __init__(self, line: int, kind: str, name: str):
        self.name = name
        super().__init__(line, f"undefined {kind} {name!r}")


@dataclass(frozen=True)
class BrokerSpec:
    id: str
    site: str
    store: Optional[str] = None  # None, "mem" or "dir"


@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    latency_ms: int
    bandwidth_mps: int

    @property
    def key(self) -> tuple[str, str]:
        return tuple(sorted((self.a, self.b)))


@dataclass(frozen=True)
class FeedSpec:
    id: str
    broker: str
    source: str
    symbols: int
    rate: int
    seed: int
    trade_pct: int
    start_ms: int = FEED_START_MS
    stop_ms: Optional[int] = None
    bad_pct: int = 0


@dataclass(frozen=True)
class SubSpec:
    id: str
    broker: str
    qoi: QoI
    filter: SubscriptionFilter
    filter_text: str
    drain: int
    start_ms: int = 0
    stop_ms: Optional[int] = None


@dataclass(frozen=True)
class TimedEvent:
    t_ms: int
    action: str  # link_down, link_up, crash
    args: tuple[str, ...]


@dataclass
class Scenario:
    sites: list[str] = field(default_factory=list)
    brokers: dict[str, BrokerSpec] = field(default_factory=dict)
    links: dict[tuple[str, str], LinkSpec] = field(default_factory=dict)
    feeds: dict[str, FeedSpec] = field(default_factory=dict)
    subs: dict[str, SubSpec] = field(default_factory=dict)
    events: list[TimedEvent] = field(default_factory=list)
    end_ms: int = 0
    seed: int = 0
    text: str = ""
    selftest: list[tuple[str, str]] = field(default_factory=list)  # (bug, subject)

    @property
    def static(self) -> bool:
        return not self.events

    def site_of(self, broker: str) -> str:
        return self.brokers[broker].site

    def ingress_of(self, source: str) -> Optional[str]:
        for f in self.feeds.values():
            if f.source == source:
                return f.broker
        return None

    def neighbors(self) -> dict[str, dict[str, int]]:
        adj: dict[str, dict[str, int]] = {b: {} for b in self.brokers}
        for l in self.links.values():
            adj[l.a][l.b] = l.latency_ms
            adj[l.b][l.a] = l.latency_ms
        return adj

    def grace_ms(self) -> int:
        """Upper bound on control-plane propagation used by the checkers."""
        return 2 * sum(l.latency_ms for l in self.links.values()) + 250


def _kv(tokens: list[str], lineno: int, required: tuple[str, ...], optional: tuple[str, ...] = ()) -> dict:
    out = {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if not eq:
            raise ScenarioError(lineno, f"expected key=value, got {tok!r}")
        if key not in required and key not in optional:
            raise ScenarioError(lineno, f"unknown key {key!r}")
        if key in out:
            raise ScenarioError(lineno, f"repeated key {key!r}")
        out[key] = value
    missing = [k for k in required if k not in out]
    if missing:
        raise ScenarioError(lineno, f"missing {', '.join(missing)}")
    return out


def _int(value: str, lineno: int, what: str, lo: int = 0, hi: Optional[int] = None) -> int:
    if not value.isdigit():
        raise ScenarioError(lineno, f"{what} must be a non-negative integer, got {value!r}")
    v = int(value)
    if v < lo or (hi is not None and v > hi):
        raise ScenarioError(lineno, f"{what} out of range: {v}")
    return v


def _ident(value: str, lineno: int) -> str:
    if not _ID_RE.fullmatch(value):
        raise ScenarioError(lineno, f"bad identifier {value!r}")
    return value


def load_scenario(text: str) -> Scenario:
    sc = Scenario(text=text)
    refs: list[tuple[int, str, str]] = []  # (line, kind, name) checked after parsing
    sources: dict[str, int] = {}
    end_line = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if not line:
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ScenarioError(lineno, str(exc)) from None
        head, rest = tokens[0], tokens[1:]
        if head == "site":
            if len(rest) != 1:
                raise ScenarioError(lineno, "usage: site <id>")
            site = _ident(rest[0], lineno)
            if site in sc.sites:
                raise ScenarioError(lineno, f"duplicate site {site!r}")
            sc.sites.append(site)
        elif head == "broker":
            if not rest:
                raise ScenarioError(lineno, "usage: broker <id> site=<id>")
            bid = _ident(rest[0], lineno)
            if bid in sc.brokers:
                raise ScenarioError(lineno, f"duplicate broker {bid!r}")
            kv = _kv(rest[1:], lineno, ("site",), ("store",))
            store = kv.get("store")
            if store not in (None, "mem", "dir"):
                raise ScenarioError(lineno, f"store must be mem or dir, got {store!r}")
            sc.brokers[bid] = BrokerSpec(bid, kv["site"], store)
            refs.append((lineno, "site", kv["site"]))
        elif head == "link":
            if len(rest) < 2:
                raise ScenarioError(lineno, "usage: link <a> <b> latency_ms=<n> bandwidth_mps=<n>")
            a, b = _ident(rest[0], lineno), _ident(rest[1], lineno)
            if a == b:
                raise ScenarioError(lineno, "a link needs two distinct brokers")
            kv = _kv(rest[2:], lineno, ("latency_ms", "bandwidth_mps"))
            spec = LinkSpec(a, b, _int(kv["latency_ms"], lineno, "latency_ms", 1),
                            _int(kv["bandwidth_mps"], lineno, "bandwidth_mps", 1))
            if spec.key in sc.links:
                raise ScenarioError(lineno, f"duplicate link {a}-{b}")
            sc.links[spec.key] = spec
            refs += [(lineno, "broker", a), (lineno, "broker", b)]
        elif head == "feed":
            if not rest:
                raise ScenarioError(lineno, "usage: feed <id> broker=<id> ...")
            fid = _ident(rest[0], lineno)
            if fid in sc.feeds:
                raise ScenarioError(lineno, f"duplicate feed {fid!r}")
            kv = _kv(rest[1:], lineno, ("broker", "source", "symbols", "rate", "seed", "trade_pct"),
                     ("start", "stop", "bad_pct"))
            source = kv["source"]
            if not _SOURCE_RE.fullmatch(source):
                raise ScenarioError(lineno, f"bad source name {source!r}")
            if source in sources:
                raise ScenarioError(lineno, f"source {source} already fed on line {sources[source]}")
            sources[source] = lineno
            sc.feeds[fid] = FeedSpec(
                fid, kv["broker"], source,
                symbols=_int(kv["symbols"], lineno, "symbols", 1, 99_999),
                rate=_int(kv["rate"], lineno, "rate", 1),
                seed=_int(kv["seed"], lineno, "seed"),
                trade_pct=_int(kv["trade_pct"], lineno, "trade_pct", 0, 100),
                start_ms=_int(kv.get("start", str(FEED_START_MS)), lineno, "start"),
                stop_ms=_int(kv["stop"], lineno, "stop") if "stop" in kv else None,
                bad_pct=_int(kv.get("bad_pct", "0"), lineno, "bad_pct", 0, 100),
            )
            refs.append((lineno, "broker", kv["broker"]))
        elif head == "sub":
            if not rest:
                raise ScenarioError(lineno, "usage: sub <id> broker=<id> qoi=... filter=\"...\" drain=<n>")
            sid = _ident(rest[0], lineno)
            if sid in sc.subs:
                raise ScenarioError(lineno, f"duplicate subscriber {sid!r}")
            kv = _kv(rest[1:], lineno, ("broker", "qoi", "filter", "drain"), ("start", "stop"))
            try:
                qoi = QoI[kv["qoi"]]
            except KeyError:
                raise ScenarioError(lineno, f"qoi must be CONFLATED or COMPLETE, got {kv['qoi']!r}") from None
            try:
                filt = parse_filter_expr(kv["filter"])
            except FilterSyntaxError as exc:
                raise ScenarioError(lineno, f"filter: {exc}") from None
            start = _int(kv.get("start", "0"), lineno, "start")
            stop = _int(kv["stop"], lineno, "stop") if "stop" in kv else None
            if stop is not None and stop <= start:
                raise ScenarioError(lineno, "stop must come after start")
            sc.subs[sid] = SubSpec(sid, kv["broker"], qoi, filt, kv["filter"],
                                   _int(kv["drain"], lineno, "drain"), start, stop)
            refs.append((lineno, "broker", kv["broker"]))
        elif head == "at":
            if len(rest) < 2:
                raise ScenarioError(lineno, "usage: at <t_ms> <action> ...")
            t = _int(rest[0], lineno, "time")
            action, args = rest[1], tuple(rest[2:])
            if action in ("link_down", "link_up"):
                if len(args) != 2:
                    raise ScenarioError(lineno, f"usage: at <t_ms> {action} <a> <b>")
                refs.append((lineno, "link", "-".join(sorted(args))))
            elif action == "crash":
                if len(args) != 1:
                    raise ScenarioError(lineno, "usage: at <t_ms> crash <broker>")
                refs.append((lineno, "broker", args[0]))
            else:
                raise ScenarioError(lineno, f"unknown action {action!r}")
            sc.events.append(TimedEvent(t, action, args))
        elif head == "end":
            if len(rest) != 1:
                raise ScenarioError(lineno, "usage: end <t_ms>")
            sc.end_ms = _int(rest[0], lineno, "end", 1)
            end_line = lineno
        elif head == "seed":
            if len(rest) != 1:
                raise ScenarioError(lineno, "usage: seed <n>")
            sc.seed = _int(rest[0], lineno, "seed")
        elif head == "selftest":
            if len(rest) != 2 or rest[0] not in SELFTEST_BUGS:
                raise ScenarioError(lineno, "usage: selftest duplicate_delivery <sub>")
            sc.selftest.append((rest[0], rest[1]))
            refs.append((lineno, "sub", rest[1]))
        else:
            raise ScenarioError(lineno, f"unknown directive {head!r}")

    link_names = {f"{a}-{b}" for a, b in sc.links}
    for lineno, kind, name in refs:
        known = {"site": sc.sites, "broker": sc.brokers, "link": link_names, "sub": sc.subs}[kind]
        if name not in known:
            raise ScenarioReferenceError(lineno, kind, name)
    if sc.end_ms <= 0:
        raise ScenarioError(end_line or len(text.splitlines()) + 1, "missing or zero end time")
    sc.events.sort(key=lambda e: e.t_ms)
    return sc


def _strip_comment(raw: str) -> str:
    """Cut a ``#`` comment that is not inside double quotes."""
    quoted = False
    for i, ch in enumerate(raw):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return raw[:i].strip()
    return raw.strip()


def format_scenario(sc: Scenario) -> str:
    """Render a scenario back to the file format."""
    out = [f"seed {sc.seed}"]
    out += [f"site {s}" for s in sc.sites]
    for b in sc.brokers.values():
        out.append(f"broker {b.id} site={b.site}" + (f" store={b.store}" if b.store else ""))
    for l in sc.links.values():
        out.append(f"link {l.a} {l.b} latency_ms={l.latency_ms} bandwidth_mps={l.bandwidth_mps}")
    for f in sc.feeds.values():
        line = (f"feed {f.id} broker={f.broker} source={f.source} symbols={f.symbols} rate={f.rate} "
                f"seed={f.seed} trade_pct={f.trade_pct} start={f.start_ms}")
        if f.stop_ms is not None:
            line += f" stop={f.stop_ms}"
        if f.bad_pct:
            line += f" bad_pct={f.bad_pct}"
        out.append(line)
    for s in sc.subs.values():
        line = f'sub {s.id} broker={s.broker} qoi={s.qoi.name} filter="{s.filter_text}" drain={s.drain}'
        if s.start_ms:
            line += f" start={s.start_ms}"
        if s.stop_ms is not None:
            line += f" stop={s.stop_ms}"
        out.append(line)
    for e in sc.events:
        out.append(f"at {e.t_ms} {e.action} {' '.join(e.args)}")
    for bug, subject in sc.selftest:
        out.append(f"selftest {bug} {subject}")
    out.append(f"end {sc.end_ms}")
    return "\n".join(out) + "\n"
