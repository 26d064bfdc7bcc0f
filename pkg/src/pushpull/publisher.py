"""Sequential fixed-rate publisher.

Posts n items to one channel, one every interval, anchored to the start
time so latency cannot drift the schedule. Failures are recorded and the
run continues; a flaky subscriber side must not stall the data source.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import requests

from .util import now_ms


@dataclass(frozen=True)
class Item:
    channel: str
    id: int
    creation_ts: int
    data: dict

    def to_wire(self) -> dict:
        return {"channel": self.channel, "id": self.id, "creationTs": self.creation_ts, "data": self.data}


def make_item(channel: str, seq: int, creation_ts: int) -> Item:
    """Stock-tick shaped payload: symbol from the channel's last segment."""
    symbol = channel.rsplit("/", 1)[-1]
    return Item(
        channel=channel,
        id=seq,
        creation_ts=creation_ts,
        data={"symbol": symbol, "price": round(100.0 + seq * 0.25, 2)},
    )


@dataclass(frozen=True)
class PublishOutcome:
    seq: int
    item_id: int
    creation_ts: int
    status: int | None          # HTTP status, None when the post never completed
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status is not None and 200 <= self.status < 300 and self.error is None

    def to_wire(self) -> dict:
        out = {"seq": self.seq, "itemId": self.item_id, "creationTs": self.creation_ts, "status": self.status}
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass(frozen=True)
class PublisherConfig:
    target: str                 # server base URL, e.g. http://127.0.0.1:8080
    channel: str
    count: int
    interval_ms: int
    request_timeout_s: float = 5.0
    start_at_ms: int | None = None   # wall ms of the first send; lets a supervisor pin the publish grid


def _sleep_until(target: float, clock: Callable[[], float]) -> None:
    # sleep most of the way, spin the last few ms: send instants stay within
    # a fraction of a ms of the schedule instead of inheriting sleep jitter
    remaining = target - clock()
    if remaining > 0.004:
        time.sleep(remaining - 0.003)
    while clock() < target:
        pass


def run_publisher(
    config: PublisherConfig,
    emit: Callable[[PublishOutcome], None] | None = None,
) -> list[PublishOutcome]:
    """Send the full schedule; returns one outcome per item, failures included.

    The loop is send-then-sleep, so it returns one full interval after the
    last send: total wall time is count * interval.
    """
    session = requests.Session()
    outcomes: list[PublishOutcome] = []
    url = config.target.rstrip("/") + "/publish"
    if config.start_at_ms is not None:
        _sleep_until(config.start_at_ms / 1000.0, time.time)
    start = time.monotonic()
    for seq in range(config.count):
        creation_ts = now_ms()
        item = make_item(config.channel, seq, creation_ts)
        status: int | None = None
        error: str | None = None
        try:
            resp = session.post(url, json=item.to_wire(), timeout=config.request_timeout_s)
            status = resp.status_code
            if not 200 <= resp.status_code < 300:
                error = f"http {resp.status_code}"
        except requests.RequestException as e:
            error = type(e).__name__
        outcome = PublishOutcome(seq=seq, item_id=item.id, creation_ts=creation_ts, status=status, error=error)
        outcomes.append(outcome)
        if emit is not None:
            emit(outcome)
        _sleep_until(start + (seq + 1) * config.interval_ms / 1000.0, time.monotonic)
    return outcomes
