"""Random scenarios for property testing: small meshes, mixed QoI, at most one fault
(a link flap, a lasting cut or a broker crash)."""

from __future__ import annotations

import random
from typing import Optional

from ..synth import symbol_names

MAX_BROKERS = 8
MAX_SITES = 4
MAX_SYMBOLS = 64
MAX_SUBS = 20


def random_scenario(
    seed: int,
    *,
    max_brokers: int = MAX_BROKERS,
    max_sites: int = MAX_SITES,
    max_symbols: int = MAX_SYMBOLS,
    max_subs: int = MAX_SUBS,
    fault: Optional[bool] = None,
    end_ms: Optional[int] = None,
) -> str:
    """Scenario text drawn from ``seed``; ``fault=None`` lets the seed decide."""
    rng = random.Random(seed)
    n_brokers = rng.randint(1, max_brokers)
    n_sites = rng.randint(1, min(max_sites, n_brokers))
    sites = [f"S{i}" for i in range(n_sites)]
    brokers = [f"B{i}" for i in range(n_brokers)]
    site_of = {b: sites[i] if i < n_sites else rng.choice(sites) for i, b in enumerate(brokers)}

    edges: set[tuple[str, str]] = set()
    for i in range(1, n_brokers):
        j = rng.randrange(i)
        edges.add((brokers[j], brokers[i]))
    extra = rng.randint(0, max(0, n_brokers - 1))
    for _ in range(extra):
        a, b = rng.sample(brokers, 2) if n_brokers > 1 else (None, None)
        if a is not None:
            edges.add(tuple(sorted((a, b))))
    edges = sorted(tuple(sorted(e)) for e in edges)

    n_feeds = rng.randint(1, 3)
    total_syms = rng.randint(n_feeds, max(n_feeds, max_symbols))
    per_feed = [max(1, total_syms // n_feeds)] * n_feeds
    feeds = []
    for i in range(n_feeds):
        src = f"F{i}"
        feeds.append((f"feed{i}", rng.choice(brokers), src, per_feed[i], rng.randint(10, 60),
                      rng.randint(0, 10_000), rng.randint(0, 100), rng.choice((0, 0, 0, 5))))
    feed_brokers = {f[1] for f in feeds}

    end = end_ms or rng.randint(5_000, 8_000)
    if fault is None:
        fault = rng.random() < 0.5
    events = []
    if fault and n_brokers > 1 and rng.random() < 0.25:
        events = [f"at {rng.randint(1_500, end - 1_000)} crash {rng.choice(brokers)}"]
    elif fault and edges:
        a, b = rng.choice(edges)
        t_down = rng.randint(1_500, end - 2_500)
        if rng.random() < 0.8:
            t_up = rng.randint(t_down + 200, end - 500)
            events = [f"at {t_down} link_down {a} {b}", f"at {t_up} link_up {a} {b}"]
        else:
            events = [f"at {t_down} link_down {a} {b}"]
    elif fault:
        fault = False

    lines = [f"seed {rng.randint(0, 1 << 30)}"]
    lines += [f"site {s}" for s in sites]
    for b in brokers:
        store = " store=mem" if b in feed_brokers else ""
        lines.append(f"broker {b} site={site_of[b]}{store}")
    for a, b in edges:
        lines.append(f"link {a} {b} latency_ms={rng.randint(1, 40)} bandwidth_mps={rng.randint(2_000, 10_000)}")
    for fid, broker, src, nsym, rate, fseed, trade_pct, bad in feeds:
        line = f"feed {fid} broker={broker} source={src} symbols={nsym} rate={rate} seed={fseed} trade_pct={trade_pct}"
        if bad:
            line += f" bad_pct={bad}"
        lines.append(line)

    for i in range(rng.randint(1, max_subs)):
        qoi = rng.choice(("COMPLETE", "CONFLATED"))
        fid, _, src, nsym, *_ = rng.choice(feeds)
        names = symbol_names(src, nsym)
        kind = rng.randrange(6)
        if kind == 0:
            expr = f"source={src}"
        elif kind == 1:
            expr = "symbol=" + ",".join(sorted(rng.sample(names, rng.randint(1, min(4, nsym)))))
        elif kind == 2:
            expr = f"prefix={names[rng.randrange(nsym)][: rng.randint(2, len(src) + 3)]}"
        elif kind == 3:
            expr = f"source={src} type={rng.choice(('TRADE', 'QUOTE', 'TRADE,QUOTE'))}"
        elif kind == 4:
            expr = f"class={rng.choice(('EQUITY', 'EQUITY', 'FUND'))}"
        else:
            expr = ""
        if qoi == "COMPLETE":
            drain = rng.choice((1_000, 500, 200, 30))
        else:
            drain = rng.choice((500, 50, 5, 0))
        line = f'sub s{i} broker={rng.choice(brokers)} qoi={qoi} filter="{expr}" drain={drain}'
        if rng.random() < 0.25:
            line += f" start={rng.randint(500, end // 2)}"
        if rng.random() < 0.15:
            line += f" stop={rng.randint(end // 2 + 100, end - 100)}"
        lines.append(line)
    lines += events
    lines.append(f"end {end}")
    return "\n".join(lines) + "\n"
