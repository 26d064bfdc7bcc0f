"""Receipt aggregation and the closed-form pull-schedule oracle.

The oracle predicts what an idealized poller sees, with zero latency: it is
the reference the measured runs are compared against.
"""
from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass
from statistics import mean
from typing import Iterable, Sequence


@dataclass(frozen=True)
class ReceiptRecord:
    """One item observed by one client, as shipped to the sink."""

    run_id: str
    client_idx: int
    mode: str
    item_id: int
    creation_ts: int
    receipt_ts: int

    @property
    def trip_time_ms(self) -> int:
        return abs(self.receipt_ts - self.creation_ts)

    def to_wire(self) -> dict:
        return {
            "runId": self.run_id,
            "clientIdx": self.client_idx,
            "mode": self.mode,
            "itemId": self.item_id,
            "creationTs": self.creation_ts,
            "receiptTs": self.receipt_ts,
            "tripTimeMs": self.trip_time_ms,
        }

    @staticmethod
    def from_wire(obj: dict) -> "ReceiptRecord":
        return ReceiptRecord(
            run_id=obj["runId"],
            client_idx=int(obj["clientIdx"]),
            mode=obj["mode"],
            item_id=int(obj["itemId"]),
            creation_ts=int(obj["creationTs"]),
            receipt_ts=int(obj["receiptTs"]),
        )


def mean_trip_time(receipts: Iterable[ReceiptRecord]) -> float | None:
    """Mean |receipt - creation| over the given receipts; None when empty."""
    trips = [r.trip_time_ms for r in receipts]
    if not trips:
        return None
    return mean(trips)


def first_receipts(receipts: Iterable[ReceiptRecord]) -> list[ReceiptRecord]:
    """Earliest receipt per (client, item); duplicates and repeats drop out."""
    best: dict[tuple[int, int], ReceiptRecord] = {}
    for r in receipts:
        key = (r.client_idx, r.item_id)
        cur = best.get(key)
        if cur is None or r.receipt_ts < cur.receipt_ts:
            best[key] = r
    return sorted(best.values(), key=lambda r: (r.client_idx, r.item_id))


def received_counts(receipts: Iterable[ReceiptRecord]) -> dict[int, tuple[int, int]]:
    """Per client: (non-unique receipt count, unique item count)."""
    total: dict[int, int] = {}
    items: dict[int, set[int]] = {}
    for r in receipts:
        total[r.client_idx] = total.get(r.client_idx, 0) + 1
        items.setdefault(r.client_idx, set()).add(r.item_id)
    return {c: (total[c], len(items[c])) for c in total}


@dataclass(frozen=True)
class PullPrediction:
    """Oracle output for one client phase."""

    non_unique: int
    unique: int
    items: tuple[int, ...]          # distinct item ids seen, ascending
    poll_count: int                 # polls issued inside the window
    empty_polls: int                # polls that found nothing published yet


def pull_schedule_oracle(
    publish_interval_ms: int,
    pull_interval_ms: int,
    total_messages: int,
    phase_ms: int,
    drain_ms: int | None = None,
) -> PullPrediction:
    """Predict receipts for one idealized pull client.

    Publishes land at k*q for k in [0, n). The client polls at phase + j*p
    for j >= 0, for every poll time strictly below n*q + drain (drain
    defaults to 2*p). A poll at T returns the newest item with creation
    time strictly below T; at-poll-instant publishes are not yet visible.
    """
    q, p, n = publish_interval_ms, pull_interval_ms, total_messages
    if q <= 0 or p <= 0 or n <= 0:
        raise ValueError("intervals and message count must be positive")
    if phase_ms < 0:
        raise ValueError("phase must be >= 0")
    if drain_ms is None:
        drain_ms = 2 * p
    window_end = n * q + drain_ms

    publish_times = [k * q for k in range(n)]
    seen: list[int] = []
    seen_set: set[int] = set()
    non_unique = 0
    polls = 0
    empty = 0
    t = phase_ms
    while t < window_end:
        polls += 1
        # newest publish strictly before t
        idx = bisect_left(publish_times, t) - 1
        if idx < 0:
            empty += 1
        else:
            non_unique += 1
            if idx not in seen_set:
                seen_set.add(idx)
                seen.append(idx)
        t += p
    return PullPrediction(
        non_unique=non_unique,
        unique=len(seen),
        items=tuple(seen),
        poll_count=polls,
        empty_polls=empty,
    )


def mean_or_none(values: Sequence[float]) -> float | None:
    return mean(values) if values else None
