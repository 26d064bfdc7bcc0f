"""Channel grammar and wildcard matching."""
from __future__ import annotations

import pytest

from pushpull.bayeux import MalformedChannel, channel_matches, parse_channel

GOOD = [
    ("/stock", ("stock",)),
    ("/stock/AAPL", ("stock", "AAPL")),
    ("/stock/*", ("stock", "*")),
    ("/*/AAPL", ("*", "AAPL")),
    ("/stock/**", ("stock", "**")),
    ("/**", ("**",)),
    ("/meta/connect", ("meta", "connect")),
    ("/a/b/c/d/e", ("a", "b", "c", "d", "e")),
]


@pytest.mark.parametrize("raw,segments", GOOD)
def test_parse_good(raw, segments):
    ch = parse_channel(raw)
    assert ch.segments == segments
    assert ch.raw == raw
    assert str(ch) == raw


BAD = [
    "",            # empty
    "stock/AAPL",  # relative
    "/",           # no segments
    "/stock/",     # trailing empty segment
    "//stock",     # leading empty segment
    "/a//b",       # inner empty segment
    "/a*/b",       # glued wildcard
    "/a/*b",       # glued wildcard
    "/**/b",       # ** not final
    "/a/**/c",     # ** not final
]


@pytest.mark.parametrize("raw", BAD)
def test_parse_bad(raw):
    with pytest.raises(MalformedChannel):
        parse_channel(raw)


def test_meta_detection():
    assert parse_channel("/meta/handshake").is_meta
    assert parse_channel("/meta").is_meta
    assert not parse_channel("/metal/works").is_meta
    assert not parse_channel("/stock/meta").is_meta


def test_pattern_detection():
    assert parse_channel("/stock/*").is_pattern
    assert parse_channel("/**").is_pattern
    assert not parse_channel("/stock/AAPL").is_pattern


# (pattern, concrete, matches)
MATCH_TABLE = [
    ("/stock/AAPL", "/stock/AAPL", True),
    ("/stock/AAPL", "/stock/MSFT", False),
    ("/stock/AAPL", "/stock/AAPL/news", False),
    ("/stock/*", "/stock/AAPL", True),
    ("/stock/*", "/stock/AAPL/news", False),     # * is exactly one segment
    ("/stock/*", "/stock", False),
    ("/*/AAPL", "/stock/AAPL", True),
    ("/*/AAPL", "/bond/AAPL", True),
    ("/*/AAPL", "/stock/MSFT", False),
    ("/*", "/stock", True),
    ("/*", "/stock/AAPL", False),
    ("/stock/**", "/stock/AAPL", True),
    ("/stock/**", "/stock/AAPL/news/today", True),
    ("/stock/**", "/stock", False),              # ** needs at least one segment
    ("/stock/**", "/bond/AAPL", False),
    ("/**", "/anything", True),
    ("/**", "/a/b/c", True),
    ("/a/*/c", "/a/b/c", True),
    ("/a/*/c", "/a/b/d", False),
    ("/a/*/c", "/a/b/b/c", False),
]


@pytest.mark.parametrize("pattern,concrete,expected", MATCH_TABLE)
def test_channel_matches(pattern, concrete, expected):
    assert channel_matches(parse_channel(pattern), parse_channel(concrete)) is expected


def test_match_target_must_be_concrete():
    with pytest.raises(MalformedChannel):
        channel_matches(parse_channel("/stock/*"), parse_channel("/stock/*"))
