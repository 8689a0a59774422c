import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import filter_strategy, random_notification
from tickermesh.model import QoI, SubscriptionFilter
from tickermesh.wire import (
    Credit,
    FrameDecoder,
    Heartbeat,
    Hello,
    Kind,
    LinkStateAd,
    PeerKind,
    ProtocolError,
    Publish,
    Replay,
    Resync,
    ResyncMode,
    Subscribe,
    SubscriptionAd,
    Unsubscribe,
    decode_message,
    encode_message,
)


def samples():
    rng = random.Random(1)
    f = SubscriptionFilter(source="XA", prefix="AB")
    return [
        Hello("B1", PeerKind.NEIGHBOR_BROKER, "FRA"),
        Subscribe(7, QoI.CONFLATED, f),
        Unsubscribe(7),
        Publish(random_notification(rng)),
        LinkStateAd("B1", 3, (("B2", 8), ("B3", 35)), "FRA", ("XA", "XB")),
        SubscriptionAd("B1", 9, (f, SubscriptionFilter())),
        Heartbeat(1716900000123),
        Credit(256),
        Resync(4, "B3", "B1", "XA", ResyncMode.AFTER_SEQ, (f,), after_seq=41, after_ts=99),
        Replay(4, "B1", "B3", True, 57, tuple(random_notification(rng) for _ in range(3))),
    ]


@pytest.mark.parametrize("msg", samples(), ids=lambda m: type(m).__name__)
def test_round_trip(msg):
    frame = encode_message(msg)
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert decode_message(frame) == msg


def test_kind_bytes():
    assert [encode_message(m)[4] for m in samples()] == [int(k) for k in Kind]


def test_heartbeat_frozen_bytes():
    assert encode_message(Heartbeat(5)) == bytes.fromhex("00000009" "07" "0000000000000005")


def test_stream_split_at_every_boundary():
    msgs = samples()
    stream = b"".join(encode_message(m) for m in msgs)
    for step in (1, 2, 3, 7, 64, len(stream)):
        dec = FrameDecoder()
        out = []
        for i in range(0, len(stream), step):
            out += dec.feed(stream[i : i + step])
        assert out == msgs


def test_bad_length_and_kind():
    with pytest.raises(ProtocolError):
        FrameDecoder().feed(b"\x00\x00\x00\x00")
    with pytest.raises(ProtocolError):
        FrameDecoder(max_frame=16).feed(b"\x00\x00\x01\x00")
    with pytest.raises(ProtocolError):
        decode_message(b"\x00\x00\x00\x01\x63")


def test_trailing_bytes_rejected():
    frame = encode_message(Credit(1))
    bad = (len(frame) - 3).to_bytes(4, "big") + frame[4:] + b"\x00"
    with pytest.raises(ProtocolError):
        decode_message(bad)


@given(filter_strategy(), st.integers(0, 2**64 - 1), st.sampled_from(QoI))
def test_subscribe_property(f, sub_id, qoi):
    m = Subscribe(sub_id, qoi, f)
    assert decode_message(encode_message(m)) == m


@given(st.binary(max_size=64))
def test_decoder_total(data):
    try:
        FrameDecoder().feed(data)
    except ProtocolError:
        pass
