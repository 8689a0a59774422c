"""Link-state topology, per-ingress shortest-path trees and subscription interest.

Every broker floods its own adjacency (LSA) and its own cover-reduced local
filter set (SUBADV), tagged with the originating broker. Knowing the full
topology and every broker's interest, a broker can compute, for any ingress,
which of its tree children lead to a matching subscriber.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

from .model import EventNotification, SubscriptionFilter, filter_matches, merge_added, merge_filters
from .wire import LinkStateAd, SubscriptionAd


class UnknownBroker(KeyError):
    pass


class TopologyView:
    """Immutable snapshot of every LSA this broker has accepted.

    An undirected edge exists only when both endpoints announce each other,
    so a dead broker disappears as soon as its neighbours re-announce.
    """

    __slots__ = ("self_id", "lsas", "received_at", "_adj", "_sig")

    def __init__(
        self,
        self_id: str,
        lsas: Mapping[str, LinkStateAd] | None = None,
        received_at: Mapping[str, int] | None = None,
    ):
        self.self_id = self_id
        self.lsas = MappingProxyType(dict(lsas or {}))
        self.received_at = MappingProxyType(dict(received_at or {}))
        self._adj: Optional[dict[str, dict[str, int]]] = None
        self._sig = None

    def lsa_seq(self, origin: str) -> int:
        lsa = self.lsas.get(origin)
        return lsa.lsa_seq if lsa else 0

    @property
    def adjacency(self) -> dict[str, dict[str, int]]:
        if self._adj is None:
            adj: dict[str, dict[str, int]] = {n: {} for n in self.nodes}
            for origin, lsa in self.lsas.items():
                for peer, cost in lsa.neighbors:
                    other = self.lsas.get(peer)
                    if other is None:
                        continue
                    back = dict(other.neighbors).get(origin)
                    if back is None:
                        continue
                    adj[origin][peer] = max(cost, back)
            self._adj = adj
        return self._adj

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self.lsas) | {self.self_id}

    def edges(self) -> frozenset[tuple[str, str, int]]:
        """Undirected edges with canonical endpoint order ``a < b``."""
        return frozenset(
            (a, b, cost) for a, peers in self.adjacency.items() for b, cost in peers.items() if a < b
        )

    def sites(self) -> dict[str, str]:
        return {o: lsa.site for o, lsa in self.lsas.items()}

    def source_ingress(self) -> dict[str, str]:
        """Map each announced feed source to the broker that ingests it (smallest id wins)."""
        out: dict[str, str] = {}
        for origin in sorted(self.lsas):
            for s in self.lsas[origin].sources:
                out.setdefault(s, origin)
        return out

    def signature(self) -> tuple:
        """What routing depends on: edges, costs and source attachment."""
        if self._sig is None:
            self._sig = (self.edges(), tuple(sorted(self.source_ingress().items())))
        return self._sig

    def component(self, start: str) -> set[str]:
        seen = {start}
        stack = [start]
        adj = self.adjacency
        while stack:
            for nxt in adj.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen


def apply_lsa(view: TopologyView, lsa: LinkStateAd, now_ms: int = 0) -> tuple[TopologyView, bool]:
    """Accept ``lsa`` if it is newer than what the view holds for its origin."""
    if lsa.lsa_seq <= view.lsa_seq(lsa.origin):
        return view, False
    lsas = dict(view.lsas)
    lsas[lsa.origin] = lsa
    received = dict(view.received_at)
    received[lsa.origin] = now_ms
    return TopologyView(view.self_id, lsas, received), True


def purge_stale(view: TopologyView, now_ms: int, max_age_ms: int) -> tuple[TopologyView, list[str]]:
    """Drop LSAs (other than our own) that were not refreshed within ``max_age_ms``."""
    dead = [
        o for o, t in view.received_at.items() if o != view.self_id and now_ms - t > max_age_ms
    ]
    if not dead:
        return view, []
    lsas = {o: l for o, l in view.lsas.items() if o not in dead}
    received = {o: t for o, t in view.received_at.items() if o not in dead}
    return TopologyView(view.self_id, lsas, received), dead


@dataclass(frozen=True)
class SpanningTree:
    source_broker: str
    parent: Mapping[str, str]
    children: Mapping[str, tuple[str, ...]]
    dist: Mapping[str, int] = field(default_factory=dict)

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self.dist)

    def subtree(self, root: str) -> list[str]:
        out, stack = [], [root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(self.children.get(node, ()))
        return out

    def path_from_root(self, node: str) -> list[str]:
        path = [node]
        while path[-1] != self.source_broker:
            path.append(self.parent[path[-1]])
        path.reverse()
        return path


def compute_tree(view: TopologyView, source_broker: str) -> SpanningTree:
    """Shortest-path tree by summed latency.

    Each node's parent is the smallest-id neighbour lying on some shortest
    path, which makes the tree a function of the view alone.
    """
    adj = view.adjacency
    if source_broker not in adj:
        raise UnknownBroker(source_broker)
    dist = {source_broker: 0}
    heap = [(0, source_broker)]
    done = set()
    while heap:
        d, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        for nxt, cost in adj[node].items():
            nd = d + cost
            if nd < dist.get(nxt, nd + 1):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    parent: dict[str, str] = {}
    children: dict[str, list[str]] = {n: [] for n in dist}
    for node in sorted(dist):
        if node == source_broker:
            continue
        best = min(p for p, cost in adj[node].items() if p in dist and dist[p] + cost == dist[node])
        parent[node] = best
        children[best].append(node)
    return SpanningTree(
        source_broker,
        MappingProxyType(parent),
        MappingProxyType({k: tuple(sorted(v)) for k, v in children.items()}),
        MappingProxyType(dist),
    )


def next_hop(view: TopologyView, target: str) -> Optional[str]:
    """First hop from this broker toward ``target``, or None when unreachable."""
    me = view.self_id
    if target == me or target not in view.adjacency:
        return None
    tree = compute_tree(view, me)
    if target not in tree.parent:
        return None
    node = target
    while tree.parent[node] != me:
        node = tree.parent[node]
    return node


class RoutingState:
    """A broker's routing knowledge: topology view, adverts and derived interest tables."""

    def __init__(self, self_id: str):
        self.self_id = self_id
        self.view = TopologyView(self_id)
        self.adverts: dict[str, SubscriptionAd] = {}
        self.local_filters: tuple[SubscriptionFilter, ...] = ()
        self.advert_seq = 0
        self._cache: dict[str, list[tuple[str, tuple[SubscriptionFilter, ...]]]] = {}
        self._trees: dict[str, SpanningTree] = {}
        self._ingress: Optional[dict[str, str]] = None
        self._forgotten: dict[str, int] = {}

    def invalidate(self) -> None:
        self._cache.clear()
        self._trees.clear()
        self._ingress = None

    def set_view(self, view: TopologyView) -> bool:
        """Install a new view; True if routing-relevant topology changed."""
        changed = view.signature() != self.view.signature()
        self.view = view
        if changed:
            self.invalidate()
            self._forget_unreachable()
        return changed

    def _forget_unreachable(self) -> None:
        # adverts from a cut-off part of the mesh go stale unseen; a rejoin resends them
        try:
            reach = compute_tree(self.view, self.self_id).dist
        except UnknownBroker:
            return
        for origin in [o for o in self.adverts if o not in reach]:
            self._forgotten[origin] = self.adverts.pop(origin).advert_seq

    def ingress_of(self, source: str) -> Optional[str]:
        if self._ingress is None:
            self._ingress = self.view.source_ingress()
        return self._ingress.get(source)

    def tree(self, ingress: str) -> SpanningTree:
        t = self._trees.get(ingress)
        if t is None:
            t = self._trees[ingress] = compute_tree(self.view, ingress)
        return t

    def apply_subadv(self, ad: SubscriptionAd) -> bool:
        if ad.origin == self.self_id:
            return False
        old = self.adverts.get(ad.origin)
        if old is not None and ad.advert_seq <= old.advert_seq:
            return False
        if old is None and ad.advert_seq < self._forgotten.get(ad.origin, 0):
            return False
        self.adverts[ad.origin] = ad
        self._cache.clear()
        return True

    def filters_of(self, broker: str) -> tuple[SubscriptionFilter, ...]:
        if broker == self.self_id:
            return self.local_filters
        ad = self.adverts.get(broker)
        return ad.filters if ad else ()

    def child_interest(self, ingress: str) -> list[tuple[str, tuple[SubscriptionFilter, ...]]]:
        """Tree children of this broker (for ``ingress``) with their subtree's merged filters.

        Children whose subtree holds no interest are left out.
        """
        cached = self._cache.get(ingress)
        if cached is not None:
            return cached
        out = []
        try:
            tree = self.tree(ingress)
        except UnknownBroker:
            tree = None
        if tree is not None and self.self_id in tree.dist:
            for child in tree.children.get(self.self_id, ()):
                fs = [f for node in tree.subtree(child) for f in self.filters_of(node)]
                if fs:
                    out.append((child, merge_filters(fs)))
        self._cache[ingress] = out
        return out

    def interest_table(self, ingress: str) -> dict[str, tuple[SubscriptionFilter, ...]]:
        return dict(self.child_interest(ingress))

    def remote_interest(self, n: EventNotification) -> bool:
        return any(
            filter_matches(f, n) for o, ad in self.adverts.items() for f in ad.filters
        )


def advertise(
    state: RoutingState,
    local_filters: Iterable[SubscriptionFilter],
    added: Optional[SubscriptionFilter] = None,
) -> Optional[SubscriptionAd]:
    """Recompute this broker's advert; return a new SUBADV only if the merged set changed.

    ``added`` names the one filter that is new since the last call, which
    lets a subscribe skip the full merge. The caller floods the result to
    every neighbour; relayed adverts are never sent back over the link they
    arrived on.
    """
    if added is not None and state.advert_seq > 0:
        merged = merge_added(state.local_filters, added)
    else:
        merged = merge_filters(local_filters)
    if merged == state.local_filters and state.advert_seq > 0:
        return None
    state.local_filters = merged
    state.advert_seq += 1
    state._cache.clear()
    return SubscriptionAd(state.self_id, state.advert_seq, merged)
