"""Metrics report: a human table and ``key=value`` records carrying the same numbers."""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from typing import Optional

CONTROL_KINDS = ("HELLO", "LSA", "SUBADV", "HEARTBEAT", "CREDIT", "RESYNC")
DATA_KINDS = ("PUB", "REPLAY")
ALL_KINDS = DATA_KINDS + CONTROL_KINDS


def percentile(values: list[int], pct: int) -> Optional[int]:
    """Nearest-rank percentile; None for an empty sample."""
    if not values:
        return None
    ordered = sorted(values)
    rank = max(1, -(-pct * len(ordered) // 100))
    return ordered[rank - 1]


@dataclass
class LinkMetrics:
    name: str
    inter_site: bool
    counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in ALL_KINDS})
    dropped: int = 0


@dataclass
class SubscriberMetrics:
    id: str
    broker: str
    qoi: str
    matched: int = 0
    delivered: int = 0
    dropped_superseded: int = 0
    discarded: int = 0
    latencies: list[int] = field(default_factory=list, repr=False)
    verdict: str = "n/a"

    @property
    def p50(self) -> Optional[int]:
        return percentile(self.latencies, 50)

    @property
    def p99(self) -> Optional[int]:
        return percentile(self.latencies, 99)


@dataclass
class FeedMetrics:
    id: str
    source: str
    broker: str
    parsed: int = 0
    accepted: int = 0
    rejected: dict[str, int] = field(default_factory=dict)
    published: int = 0
    derived: int = 0
    paused_ms: int = 0

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())


@dataclass
class Reconvergence:
    t_ms: int
    action: str
    ms: Optional[int]


@dataclass
class MetricsReport:
    seed: int
    end_ms: int
    quiesced_ms: int = 0
    quiescent: bool = True
    links: dict[str, LinkMetrics] = field(default_factory=dict)
    subscribers: dict[str, SubscriberMetrics] = field(default_factory=dict)
    feeds: dict[str, FeedMetrics] = field(default_factory=dict)
    reconvergence: list[Reconvergence] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    event_log: list[str] = field(default_factory=list, repr=False)

    # -- totals -------------------------------------------------------------

    def pub_crossings(self, inter_site_only: bool = False) -> int:
        return sum(l.counts["PUB"] for l in self.links.values() if l.inter_site or not inter_site_only)

    def totals(self) -> dict[str, int]:
        return {
            "published": sum(f.published for f in self.feeds.values()),
            "rejected": sum(f.rejected_total for f in self.feeds.values()),
            "derived": sum(f.derived for f in self.feeds.values()),
            "delivered": sum(s.delivered for s in self.subscribers.values()),
            "dropped_superseded": sum(s.dropped_superseded for s in self.subscribers.values()),
            "pub_link_crossings": self.pub_crossings(),
            "pub_inter_site_crossings": self.pub_crossings(inter_site_only=True),
            "replay_messages": sum(l.counts["REPLAY"] for l in self.links.values()),
            "control_messages": sum(l.counts[k] for l in self.links.values() for k in CONTROL_KINDS),
            "violations": len(self.violations),
        }

    # -- rendering ------------------------------------------------------------

    def to_records(self) -> str:
        def fmt(v) -> str:
            if v is None:
                return "-"
            if isinstance(v, bool):
                return "1" if v else "0"
            s = str(v)
            return shlex.quote(s) if (not s or any(c in s for c in " \"'=#")) else s

        lines = [f"record=run seed={self.seed} end_ms={self.end_ms} quiesced_ms={self.quiesced_ms} "
                 f"quiescent={fmt(self.quiescent)}"]
        for name in sorted(self.links):
            l = self.links[name]
            counts = " ".join(f"{k}={l.counts[k]}" for k in ALL_KINDS)
            lines.append(f"record=link name={name} inter_site={fmt(l.inter_site)} {counts} dropped={l.dropped}")
        for sid in sorted(self.feeds):
            f = self.feeds[sid]
            rej = "".join(f" rejected.{k}={v}" for k, v in sorted(f.rejected.items()))
            lines.append(
                f"record=feed id={f.id} source={f.source} broker={f.broker} parsed={f.parsed} "
                f"accepted={f.accepted} rejected={f.rejected_total}{rej} published={f.published} "
                f"derived={f.derived} paused_ms={f.paused_ms}"
            )
        for sid in sorted(self.subscribers):
            s = self.subscribers[sid]
            lines.append(
                f"record=sub id={s.id} broker={s.broker} qoi={s.qoi} matched={s.matched} "
                f"delivered={s.delivered} dropped_superseded={s.dropped_superseded} discarded={s.discarded} "
                f"p50_ms={fmt(s.p50)} p99_ms={fmt(s.p99)} verdict={s.verdict}"
            )
        for r in self.reconvergence:
            lines.append(f"record=reconvergence t_ms={r.t_ms} action={fmt(r.action)} ms={fmt(r.ms)}")
        lines.append("record=totals " + " ".join(f"{k}={v}" for k, v in self.totals().items()))
        for v in self.violations:
            lines.append(f"record=violation text={fmt(v)}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        out = [f"scenario seed {self.seed}, end {self.end_ms} ms, quiescent at {self.quiesced_ms} ms", ""]
        if self.links:
            out.append(f"{'link':<16} {'site':<5} " + " ".join(f"{k:>9}" for k in ALL_KINDS))
            for name in sorted(self.links):
                l = self.links[name]
                out.append(f"{name:<16} {'x' if l.inter_site else '':<5} "
                           + " ".join(f"{l.counts[k]:>9}" for k in ALL_KINDS))
            out.append("")
        if self.feeds:
            out.append(f"{'feed':<10} {'source':<8} {'broker':<8} {'parsed':>8} {'accepted':>8} "
                       f"{'rejected':>8} {'derived':>8}")
            for fid in sorted(self.feeds):
                f = self.feeds[fid]
                out.append(f"{f.id:<10} {f.source:<8} {f.broker:<8} {f.parsed:>8} {f.accepted:>8} "
                           f"{f.rejected_total:>8} {f.derived:>8}")
            out.append("")
        if self.subscribers:
            out.append(f"{'sub':<10} {'broker':<8} {'qoi':<9} {'matched':>8} {'deliv':>8} {'superseded':>10} "
                       f"{'p50':>6} {'p99':>6}  verdict")
            for sid in sorted(self.subscribers):
                s = self.subscribers[sid]
                p50 = "-" if s.p50 is None else str(s.p50)
                p99 = "-" if s.p99 is None else str(s.p99)
                out.append(f"{s.id:<10} {s.broker:<8} {s.qoi:<9} {s.matched:>8} {s.delivered:>8} "
                           f"{s.dropped_superseded:>10} {p50:>6} {p99:>6}  {s.verdict}")
            out.append("")
        for r in self.reconvergence:
            took = "not reached" if r.ms is None else f"{r.ms} ms"
            out.append(f"reconvergence after {r.action} at {r.t_ms} ms: {took}")
        t = self.totals()
        out.append("totals: " + ", ".join(f"{k} {v}" for k, v in t.items()))
        if self.violations:
            out.append("")
            out.append(f"{len(self.violations)} violation(s):")
            out += [f"  {v}" for v in self.violations]
        return "\n".join(out) + "\n"

    def render(self) -> str:
        return self.to_table() + "\n" + self.to_records()


def parse_records(text: str) -> list[dict[str, str]]:
    """Read ``key=value`` records back (the inverse of :meth:`MetricsReport.to_records`)."""
    out = []
    for line in text.splitlines():
        if not line.startswith("record="):
            continue
        rec = {}
        for tok in shlex.split(line):
            k, _, v = tok.partition("=")
            rec[k] = v
        out.append(rec)
    return out
