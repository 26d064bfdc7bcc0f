"""Simulated client fleet: K logical clients in one process, one asyncio task
each, shipping receipt records to the stats sink as they arrive.

Push clients drive the long-poll session machine; pull clients poll on a
fixed grid. Pull phases are evenly spaced across one poll interval so the
fleet as a whole brackets every possible alignment against the publisher,
deterministically.
"""
from __future__ import annotations

import asyncio
import json
import random
from dataclasses import dataclass, field
from typing import Protocol

import aiohttp

from .bayeux import (
    Action,
    BayeuxMessage,
    ClientSessionState,
    Phase,
    ProtocolViolation,
    RecvAdviceHandshake,
    RecvConnectReply,
    RecvDeliver,
    RecvHandshakeOk,
    RecvSubscribeOk,
    SendConnect,
    SendHandshake,
    SendSubscribe,
    decode_batch,
    parse_channel,
    step,
)
from .metrics import ReceiptRecord
from .util import now_ms

CONNECT_CH = "/meta/connect"
HANDSHAKE_CH = "/meta/handshake"
SUBSCRIBE_CH = "/meta/subscribe"


@dataclass(frozen=True)
class SwarmConfig:
    mode: str                    # "push" or "pull"
    clients: int
    target: str                  # server base URL
    channel: str                 # concrete channel to watch
    run_id: str
    duration_ms: int
    pull_interval_ms: int = 1500
    ramp_up_ms: int | None = None     # push: handshakes spread over this window
    backoff_ms: int = 1000
    queue_capacity: int = 10000
    seed: int = 0
    grid_epoch_ms: int | None = None  # wall ms the pull tick grids anchor to; default swarm start

    def effective_ramp_up(self) -> int:
        if self.ramp_up_ms is not None:
            return self.ramp_up_ms
        return min(2000, self.clients * 5)


@dataclass
class SwarmStats:
    emitted: int = 0
    dropped: int = 0
    errors: int = 0
    clients_completed: int = 0
    pull_anchors: dict[int, int] = field(default_factory=dict)   # clientIdx -> wall ms of tick 0

    def summary(self) -> dict:
        return {
            "emitted": self.emitted,
            "dropped": self.dropped,
            "errors": self.errors,
            "clientsCompleted": self.clients_completed,
            "pullAnchors": {str(k): v for k, v in sorted(self.pull_anchors.items())},
        }


class RecordSink(Protocol):
    def offer(self, record: ReceiptRecord) -> bool: ...
    async def close(self) -> None: ...


class ListSink:
    """Collects records in memory; handy for tests and smoke runs."""

    def __init__(self):
        self.records: list[ReceiptRecord] = []

    def offer(self, record: ReceiptRecord) -> bool:
        self.records.append(record)
        return True

    async def close(self) -> None:
        pass


class StreamSink:
    """Bounded queue in front of an NDJSON byte stream (TCP or file).

    offer() never blocks the client tasks: a full queue refuses the record
    and the caller counts the drop.
    """

    _SENTINEL = object()

    def __init__(self, write_bytes, drain, capacity: int):
        self._queue: asyncio.Queue = asyncio.Queue(maxsize=capacity)
        self._write = write_bytes
        self._drain = drain
        self._task = asyncio.create_task(self._pump())

    @classmethod
    async def to_tcp(cls, host: str, port: int, capacity: int) -> "StreamSink":
        reader, writer = await asyncio.open_connection(host, port)
        sink = cls(writer.write, writer.drain, capacity)
        sink._writer = writer
        return sink

    @classmethod
    def to_file(cls, path: str, capacity: int) -> "StreamSink":
        f = open(path, "ab")

        async def drain():
            pass

        sink = cls(f.write, drain, capacity)
        sink._file = f
        return sink

    def offer(self, record: ReceiptRecord) -> bool:
        try:
            self._queue.put_nowait(record)
            return True
        except asyncio.QueueFull:
            return False

    async def _pump(self):
        while True:
            item = await self._queue.get()
            if item is self._SENTINEL:
                break
            line = json.dumps(item.to_wire(), separators=(",", ":")) + "\n"
            self._write(line.encode())
            if self._queue.empty():
                await self._drain()

    async def close(self) -> None:
        await self._queue.put(self._SENTINEL)
        await self._task
        if hasattr(self, "_writer"):
            await self._drain()
            self._writer.close()
            await self._writer.wait_closed()
        if hasattr(self, "_file"):
            self._file.close()


# ---------------------------------------------------------------------------
# push client


def _handshake_req() -> list[dict]:
    return [{"channel": HANDSHAKE_CH, "version": "1.0", "supportedConnectionTypes": ["long-polling"]}]


def _subscribe_req(client_id: str, channel: str) -> list[dict]:
    return [{"channel": SUBSCRIBE_CH, "clientId": client_id, "subscription": channel}]


def _connect_req(client_id: str) -> list[dict]:
    return [{"channel": CONNECT_CH, "clientId": client_id, "connectionType": "long-polling"}]


async def _post_batch(http: aiohttp.ClientSession, url: str, batch: list[dict]) -> list[BayeuxMessage]:
    async with http.post(url, json=batch) as resp:
        body = await resp.read()
        if resp.status != 200:
            raise aiohttp.ClientResponseError(
                resp.request_info, resp.history, status=resp.status, message=body.decode(errors="replace")
            )
        return decode_batch(body)


def _wants_rehandshake(msg: BayeuxMessage) -> bool:
    return bool(msg.advice) and msg.advice.get("reconnect") == "handshake"


async def _push_client(
    idx: int,
    config: SwarmConfig,
    http: aiohttp.ClientSession,
    sink: RecordSink,
    stats: SwarmStats,
    rng: random.Random,
) -> None:
    url = config.target.rstrip("/") + "/cometd"
    watched = parse_channel(config.channel)
    state = ClientSessionState()

    # spread session setup so a big fleet does not handshake as one thundering herd
    ramp = config.effective_ramp_up()
    if ramp > 0 and config.clients > 1:
        await asyncio.sleep((idx * ramp / config.clients) / 1000.0)

    while True:
        try:
            if state.phase is Phase.UNCONNECTED:
                state, _ = step(state, SendHandshake())
                out = await _post_batch(http, url, _handshake_req())
                reply = next(m for m in out if m.channel.raw == HANDSHAKE_CH)
                if not reply.successful or reply.client_id is None:
                    raise aiohttp.ClientError("handshake refused")
                state, _ = step(state, RecvHandshakeOk(reply.client_id))

            if config.channel not in state.subscriptions:
                state, _ = step(state, SendSubscribe(config.channel))
                out = await _post_batch(http, url, _subscribe_req(state.client_id, config.channel))
                reply = next(m for m in out if m.channel.raw == SUBSCRIBE_CH)
                if _wants_rehandshake(reply):
                    state, _ = step(state, RecvAdviceHandshake())
                    continue
                if not reply.successful:
                    raise aiohttp.ClientError(f"subscribe refused: {reply.error}")
                state, _ = step(state, RecvSubscribeOk(config.channel))

            state, _ = step(state, SendConnect())
            out = await _post_batch(http, url, _connect_req(state.client_id))
            receipt_ts = now_ms()
            for msg in out:
                if msg.channel.raw == CONNECT_CH:
                    if _wants_rehandshake(msg):
                        state, _ = step(state, RecvAdviceHandshake())
                        break
                    state, _ = step(state, RecvConnectReply())
                elif msg.channel == watched and msg.id is not None:
                    state, actions = step(state, RecvDeliver(msg))
                    if Action.RECORD_RECEIPT in actions:
                        creation = (msg.ext or {}).get("creationTs")
                        if creation is None:
                            stats.errors += 1
                            continue
                        record = ReceiptRecord(
                            run_id=config.run_id, client_idx=idx, mode="push",
                            item_id=int(msg.id), creation_ts=int(creation), receipt_ts=receipt_ts,
                        )
                        if sink.offer(record):
                            stats.emitted += 1
                        else:
                            stats.dropped += 1
        except asyncio.CancelledError:
            raise
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError, ProtocolViolation, ValueError) as e:
            stats.errors += 1
            state = ClientSessionState()  # session is suspect; start clean
            await asyncio.sleep(config.backoff_ms * rng.uniform(0.75, 1.25) / 1000.0)


# ---------------------------------------------------------------------------
# pull client


async def _pull_client(
    idx: int,
    config: SwarmConfig,
    http: aiohttp.ClientSession,
    sink: RecordSink,
    stats: SwarmStats,
    rng: random.Random,
    epoch_mono: float,
) -> None:
    url = config.target.rstrip("/") + "/pull"
    p_s = config.pull_interval_ms / 1000.0
    phase_s = ((idx + 0.5) * config.pull_interval_ms / config.clients) / 1000.0
    loop = asyncio.get_running_loop()
    wall_minus_mono = now_ms() - loop.time() * 1000.0
    stats.pull_anchors[idx] = int(round(epoch_mono * 1000.0 + phase_s * 1000.0 + wall_minus_mono))

    # an epoch in the past means joining a grid already underway, not a burst
    k = 0
    late = loop.time() - (epoch_mono + phase_s)
    if late > 0:
        k = int(late / p_s) + 1
    while True:
        target = epoch_mono + phase_s + k * p_s
        delay = target - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)
        k += 1
        try:
            async with http.get(url, params={"channel": config.channel}) as resp:
                if resp.status == 200:
                    item = await resp.json()
                    receipt_ts = now_ms()
                    record = ReceiptRecord(
                        run_id=config.run_id, client_idx=idx, mode="pull",
                        item_id=int(item["id"]), creation_ts=int(item["creationTs"]),
                        receipt_ts=receipt_ts,
                    )
                    if sink.offer(record):
                        stats.emitted += 1
                    else:
                        stats.dropped += 1
                elif resp.status != 204:
                    stats.errors += 1
        except asyncio.CancelledError:
            raise
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError, ValueError, KeyError) as e:
            stats.errors += 1
            await asyncio.sleep(config.backoff_ms * rng.uniform(0.75, 1.25) / 1000.0)
            # rejoin the tick grid instead of drifting by the backoff
            k = max(k, int((loop.time() - epoch_mono - phase_s) / p_s) + 1)


# ---------------------------------------------------------------------------
# fleet runner


async def run_swarm(config: SwarmConfig, sink: RecordSink, stop: asyncio.Event | None = None) -> SwarmStats:
    """Run the fleet until duration elapses or `stop` fires; returns stats.

    Clients that are still healthy when time runs out count as completed;
    a client task dying on an unexpected exception does not.
    """
    if config.mode not in ("push", "pull"):
        raise ValueError(f"unknown mode {config.mode!r}")
    stats = SwarmStats()
    rng = random.Random(config.seed)
    connector = aiohttp.TCPConnector(limit=0)
    timeout = aiohttp.ClientTimeout(total=None)
    loop = asyncio.get_running_loop()
    epoch_mono = loop.time()
    if config.grid_epoch_ms is not None:
        epoch_mono += (config.grid_epoch_ms - now_ms()) / 1000.0

    async with aiohttp.ClientSession(connector=connector, timeout=timeout) as http:
        tasks: list[asyncio.Task] = []
        for idx in range(config.clients):
            if config.mode == "push":
                coro = _push_client(idx, config, http, sink, stats, random.Random(rng.random()))
            else:
                coro = _pull_client(idx, config, http, sink, stats, random.Random(rng.random()), epoch_mono)
            tasks.append(asyncio.create_task(coro))

        stop_wait = asyncio.create_task(stop.wait()) if stop is not None else None
        try:
            if stop_wait is not None:
                await asyncio.wait([stop_wait], timeout=config.duration_ms / 1000.0)
            else:
                await asyncio.sleep(config.duration_ms / 1000.0)
        finally:
            for t in tasks:
                t.cancel()
            if stop_wait is not None:
                stop_wait.cancel()
            results = await asyncio.gather(*tasks, return_exceptions=True)
            for r in results:
                if isinstance(r, asyncio.CancelledError) or r is None or not isinstance(r, BaseException):
                    stats.clients_completed += 1
                else:
                    stats.errors += 1

    await sink.close()
    return stats
