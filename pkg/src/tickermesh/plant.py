"""Ticker plant: feed handler, enrichment and derived-event detection in one pipeline."""

from __future__ import annotations

from typing import Optional

from .enrich import DerivedEvent, Enricher, RuleSet
from .feedpipe import FeedConfig, FeedHandler, RawFeedEvent
from .model import EventNotification


class TickerPlant:
    """Turns raw feed input into enriched notifications.

    Derived events are kept on ``derived``; callers decide whether to publish
    them (see :meth:`Enricher.derived_notification`).
    """

    def __init__(self, cfg: FeedConfig, rules: RuleSet | None = None):
        self.handler = FeedHandler(cfg)
        self.enricher = Enricher(rules)
        self.derived: list[DerivedEvent] = []

    @property
    def stats(self):
        return self.handler.stats

    def _enrich(self, n: Optional[EventNotification]) -> Optional[EventNotification]:
        if n is None:
            return None
        enriched, derived = self.enricher.process(n)
        self.derived.extend(derived)
        return enriched

    def feed_line(self, line: str, now_ms: int) -> Optional[EventNotification]:
        return self._enrich(self.handler.handle_line(line, now_ms))

    def feed_raw(self, raw: RawFeedEvent, now_ms: int) -> Optional[EventNotification]:
        self.handler.stats.parsed += 1
        return self._enrich(self.handler.accept_raw(raw, now_ms))

    def feed_text(self, text: str, now_ms: int) -> list[EventNotification]:
        return [self._enrich(n) for n in self.handler.handle_text(text, now_ms)]

    def feed_binary(self, buf: bytes, now_ms: int) -> list[EventNotification]:
        return [self._enrich(n) for n in self.handler.handle_binary(buf, now_ms)]
