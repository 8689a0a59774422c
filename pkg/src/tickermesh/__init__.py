"""Market-data distribution: ticker plant, event store and a content-based broker mesh."""

from .broker import Broker, Session, SubscriptionIndex
from .enrich import Enricher, RuleSet
from .feedpipe import FeedConfig, FeedHandler, FeedReject, RejectReason
from .model import (
    EnrichmentBlock,
    EventNotification,
    EventType,
    InstrumentClass,
    QoI,
    Subscription,
    SubscriptionFilter,
    SymbolKey,
    decode_notification,
    encode_notification,
    filter_covers,
    filter_matches,
    merge_filters,
    parse_filter_expr,
)
from .store import EventStore

__version__ = "0.1.0"

__all__ = [
    "Broker",
    "EnrichmentBlock",
    "Enricher",
    "EventNotification",
    "EventStore",
    "EventType",
    "FeedConfig",
    "FeedHandler",
    "FeedReject",
    "InstrumentClass",
    "QoI",
    "RejectReason",
    "RuleSet",
    "Session",
    "Subscription",
    "SubscriptionFilter",
    "SubscriptionIndex",
    "SymbolKey",
    "decode_notification",
    "encode_notification",
    "filter_covers",
    "filter_matches",
    "merge_filters",
    "parse_filter_expr",
]
