"""Snapshot poll server: clients GET the latest item per channel.

Last writer wins per channel; publish ids must be strictly increasing.
There is no per-client state at all, which is the entire point of the
pull model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from aiohttp import web

from .bayeux import MalformedChannel, parse_channel
from .util import now_ms, print_ready, print_summary, start_site


@dataclass
class StoredItem:
    id: int
    creation_ts: int
    data: dict
    body: bytes  # prebuilt 200 payload, identical for repeated polls


@dataclass
class PullState:
    items: dict[str, StoredItem] = field(default_factory=dict)
    pulls: int = 0
    publishes: int = 0
    hits: int = 0
    misses: int = 0
    stale: int = 0
    bad_requests: int = 0

    def counters(self) -> dict[str, int]:
        return {
            "pulls": self.pulls,
            "publishes": self.publishes,
            "hits": self.hits,
            "misses": self.misses,
            "stale": self.stale,
            "badRequests": self.bad_requests,
        }


def _error(status: int, code: str) -> web.Response:
    return web.json_response({"error": code}, status=status)


def _validated_channel(raw: str | None) -> str:
    if raw is None:
        raise MalformedChannel("missing channel")
    ch = parse_channel(raw)
    if ch.is_pattern:
        raise MalformedChannel(f"wildcards not allowed here: {raw!r}")
    if ch.is_meta:
        raise MalformedChannel(f"meta channels carry no data: {raw!r}")
    return ch.raw


async def handle_pull(request: web.Request) -> web.Response:
    state: PullState = request.app[STATE_KEY]
    try:
        channel = _validated_channel(request.query.get("channel"))
    except MalformedChannel:
        state.bad_requests += 1
        return _error(400, "MalformedChannel")
    state.pulls += 1
    item = state.items.get(channel)
    if item is None:
        state.misses += 1
        return web.Response(status=204)
    state.hits += 1
    return web.Response(body=item.body, content_type="application/json")


async def handle_publish(request: web.Request) -> web.Response:
    state: PullState = request.app[STATE_KEY]
    try:
        obj = await request.json()
    except (json.JSONDecodeError, UnicodeDecodeError):
        state.bad_requests += 1
        return _error(400, "BadItem")
    if not isinstance(obj, dict):
        state.bad_requests += 1
        return _error(400, "BadItem")
    try:
        channel = _validated_channel(obj.get("channel"))
        item_id = int(obj["id"])
        creation_ts = int(obj.get("creationTs", now_ms()))
        data = obj.get("data")
        if not isinstance(data, dict):
            raise TypeError("data must be an object")
    except (MalformedChannel, KeyError, TypeError, ValueError):
        state.bad_requests += 1
        return _error(400, "BadItem")

    existing = state.items.get(channel)
    if existing is not None and item_id <= existing.id:
        state.stale += 1
        return _error(409, "StaleItem")

    body = json.dumps(
        {"channel": channel, "id": item_id, "creationTs": creation_ts, "data": data},
        separators=(",", ":"),
    ).encode()
    state.items[channel] = StoredItem(id=item_id, creation_ts=creation_ts, data=data, body=body)
    state.publishes += 1
    return web.json_response({"accepted": True, "id": item_id})


async def handle_counters(request: web.Request) -> web.Response:
    state: PullState = request.app[STATE_KEY]
    return web.json_response(state.counters())


STATE_KEY: web.AppKey[PullState] = web.AppKey("state", PullState)


def build_app(state: PullState | None = None) -> web.Application:
    app = web.Application()
    app[STATE_KEY] = state or PullState()
    app.add_routes(
        [
            web.get("/pull", handle_pull),
            web.post("/publish", handle_publish),
            web.get("/counters", handle_counters),
        ]
    )
    return app


async def serve(stop, host: str, port: int) -> int:
    app = build_app()
    runner, bound = await start_site(app, host, port)
    print_ready(bound)
    try:
        await stop.wait()
    finally:
        await runner.cleanup()
    print_summary(app[STATE_KEY].counters())
    return 0
