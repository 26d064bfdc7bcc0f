"""Message batch encode/decode."""
from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushpull.bayeux import (
    MAX_BATCH,
    BayeuxMessage,
    DecodeError,
    decode_batch,
    encode_batch,
    parse_channel,
)


def msg(**kw) -> BayeuxMessage:
    kw.setdefault("channel", parse_channel("/stock/AAPL"))
    return BayeuxMessage(**kw)


def test_round_trip_deliver():
    m = msg(id="17", data={"symbol": "AAPL", "price": 104.25}, ext={"creationTs": 1700000000123})
    back = decode_batch(encode_batch([m]))
    assert back == [m]


def test_round_trip_meta_batch():
    batch = [
        BayeuxMessage(
            channel=parse_channel("/meta/handshake"),
            version="1.0",
            supported_connection_types=("long-polling",),
        ),
        BayeuxMessage(
            channel=parse_channel("/meta/connect"),
            client_id="c-1",
            connection_type="long-polling",
        ),
    ]
    assert decode_batch(encode_batch(batch)) == batch


def test_deliver_id_stays_a_string_on_the_wire():
    m = msg(id="42")
    wire = json.loads(encode_batch([m]))
    assert wire[0]["id"] == "42"


def test_numeric_id_coerced_to_string_on_decode():
    back = decode_batch(b'[{"channel":"/stock/AAPL","id":42}]')
    assert back[0].id == "42"


def test_unknown_fields_ignored():
    back = decode_batch(b'[{"channel":"/stock/AAPL","frobnicate":true,"x":[1,2]}]')
    assert back[0].channel.raw == "/stock/AAPL"


def test_empty_batch_rejected_both_ways():
    with pytest.raises(ValueError):
        encode_batch([])
    with pytest.raises(DecodeError):
        decode_batch(b"[]")


def test_oversize_batch_rejected_both_ways():
    batch = [msg(id=str(i)) for i in range(MAX_BATCH + 1)]
    with pytest.raises(ValueError):
        encode_batch(batch)
    payload = json.dumps([{"channel": "/a"} for _ in range(MAX_BATCH + 1)]).encode()
    with pytest.raises(DecodeError):
        decode_batch(payload)


def test_batch_at_cap_is_fine():
    batch = [msg(id=str(i)) for i in range(MAX_BATCH)]
    assert len(decode_batch(encode_batch(batch))) == MAX_BATCH


@pytest.mark.parametrize(
    "payload",
    [
        b"not json",
        b"{}",                                # not an array
        b"[1,2,3]",                           # elements not objects
        b'[{"channel": null}]',
        b'[{"noChannel": true}]',
        b'[{"channel": "stock/AAPL"}]',       # relative channel
        b'[{"channel": "/a//b"}]',
    ],
)
def test_decode_errors(payload):
    with pytest.raises(DecodeError):
        decode_batch(payload)


CHANNEL_ALPHABET = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-",
    min_size=1,
    max_size=10,
)


@st.composite
def wire_messages(draw):
    segs = draw(st.lists(CHANNEL_ALPHABET, min_size=1, max_size=4))
    channel = parse_channel("/" + "/".join(segs))
    return BayeuxMessage(
        channel=channel,
        client_id=draw(st.one_of(st.none(), st.text(min_size=1, max_size=12))),
        successful=draw(st.one_of(st.none(), st.booleans())),
        subscription=draw(st.one_of(st.none(), st.just("/stock/*"))),
        connection_type=draw(st.one_of(st.none(), st.just("long-polling"))),
        version=draw(st.one_of(st.none(), st.just("1.0"))),
        advice=draw(st.one_of(st.none(), st.fixed_dictionaries({"reconnect": st.sampled_from(["retry", "handshake"]), "timeout": st.integers(0, 60000), "interval": st.integers(0, 1000)}))),
        data=draw(st.one_of(st.none(), st.dictionaries(st.text(min_size=1, max_size=6), st.integers() | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=8), max_size=4))),
        id=draw(st.one_of(st.none(), st.integers(0, 10**9).map(str))),
        ext=draw(st.one_of(st.none(), st.fixed_dictionaries({"creationTs": st.integers(0, 2**53)}))),
        error=draw(st.one_of(st.none(), st.just("boom"))),
    )


@settings(max_examples=250, deadline=None)
@given(st.lists(wire_messages(), min_size=1, max_size=MAX_BATCH))
def test_round_trip_any_batch(batch):
    assert decode_batch(encode_batch(batch)) == batch


def test_many_seeded_round_trips():
    # a wide deterministic sweep on top of the property test
    import random

    rng = random.Random(20260816)
    for trial in range(10_000):
        n = rng.randint(1, 5)
        batch = []
        for i in range(n):
            batch.append(
                BayeuxMessage(
                    channel=parse_channel(rng.choice(["/stock/AAPL", "/a/b/c", "/meta/connect", "/x"])),
                    client_id=rng.choice([None, f"c-{rng.randint(0, 99)}"]),
                    successful=rng.choice([None, True, False]),
                    id=rng.choice([None, str(rng.randint(0, 10**6))]),
                    data=rng.choice([None, {"price": rng.randint(0, 500) * 0.25, "seq": i}]),
                    ext=rng.choice([None, {"creationTs": rng.randint(0, 2**53)}]),
                )
            )
        assert decode_batch(encode_batch(batch)) == batch
