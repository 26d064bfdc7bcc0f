"""Long-polling pub/sub server.

One POST endpoint carries message batches: handshake mints a clientId,
connect parks the request until data arrives or the hold timeout fires,
subscribe registers channel patterns. Publishes come in over a plain POST
and fan out to held connections immediately; clients between connects get
their items queued in a bounded per-session outbox.

Everything runs on one event loop, so registry mutations are naturally
serialized; there are no locks.
"""
from __future__ import annotations

import asyncio
import json
import uuid
from dataclasses import dataclass, field

from aiohttp import web

from .bayeux import (
    BayeuxMessage,
    ChannelName,
    DecodeError,
    MalformedChannel,
    channel_matches,
    decode_batch,
    encode_batch,
    parse_channel,
)
from .util import now_ms, print_ready, print_summary, start_site

DEFAULT_TIMEOUT_MS = 45_000
DEFAULT_INTERVAL_MS = 0
DEFAULT_SWEEP_MS = 100
DEFAULT_OUTBOX_CAPACITY = 16

HANDSHAKE = parse_channel("/meta/handshake")
CONNECT = parse_channel("/meta/connect")
SUBSCRIBE = parse_channel("/meta/subscribe")


@dataclass
class Held:
    """A parked connect: resolving the future releases the HTTP response."""

    future: asyncio.Future
    deadline_ms: int
    reply: BayeuxMessage


@dataclass
class Session:
    client_id: str
    last_seen_ms: int
    subscriptions: list[ChannelName] = field(default_factory=list)
    first_sub_seq: int | None = None
    outbox: list[BayeuxMessage] = field(default_factory=list)
    dropped: int = 0
    held: Held | None = None


@dataclass
class PushConfig:
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    interval_ms: int = DEFAULT_INTERVAL_MS
    sweep_period_ms: int = DEFAULT_SWEEP_MS
    outbox_capacity: int = DEFAULT_OUTBOX_CAPACITY
    session_grace_ms: int | None = None  # default: 2x timeout

    def grace(self) -> int:
        return self.session_grace_ms if self.session_grace_ms is not None else 2 * self.timeout_ms


class PushState:
    def __init__(self, config: PushConfig | None = None):
        self.config = config or PushConfig()
        self.sessions: dict[str, Session] = {}
        self._sub_seq = 0
        self.handshakes = 0
        self.connects = 0
        self.subscribes = 0
        self.publishes = 0
        self.delivers_sent = 0
        self.dropped_total = 0
        self.expired_sessions = 0

    def counters(self) -> dict[str, int]:
        return {
            "handshakes": self.handshakes,
            "connects": self.connects,
            "subscribes": self.subscribes,
            "publishes": self.publishes,
            "deliversSent": self.delivers_sent,
            "droppedFromOutbox": self.dropped_total,
            "expiredSessions": self.expired_sessions,
            "liveSessions": len(self.sessions),
        }

    # -- session registry ---------------------------------------------------

    def create_session(self) -> Session:
        cid = uuid.uuid4().hex
        s = Session(client_id=cid, last_seen_ms=now_ms())
        self.sessions[cid] = s
        return s

    def next_sub_seq(self) -> int:
        self._sub_seq += 1
        return self._sub_seq

    def subscribers_for(self, channel: ChannelName) -> list[Session]:
        """Matching sessions in the order they first subscribed."""
        hits = [
            s
            for s in self.sessions.values()
            if s.first_sub_seq is not None
            and any(channel_matches(pat, channel) for pat in s.subscriptions)
        ]
        hits.sort(key=lambda s: s.first_sub_seq)
        return hits

    # -- held connections ---------------------------------------------------

    def release_held(self, session: Session, extra: list[BayeuxMessage]) -> None:
        """Resolve a parked connect with delivers (possibly none) + its reply."""
        held = session.held
        session.held = None
        # the hold itself proves liveness; restart the idle clock
        session.last_seen_ms = now_ms()
        if held is None or held.future.done():
            return
        held.future.set_result(extra + [held.reply])

    def expire_idle(self, now: int) -> None:
        grace = self.config.grace()
        for cid in [c for c, s in self.sessions.items() if s.held is None and now - s.last_seen_ms > grace]:
            del self.sessions[cid]
            self.expired_sessions += 1

    def sweep(self, now: int) -> None:
        for session in list(self.sessions.values()):
            if session.held is not None and now >= session.held.deadline_ms:
                self.release_held(session, [])
        self.expire_idle(now)


def _advice(state: PushState, reconnect: str) -> dict:
    return {
        "reconnect": reconnect,
        "timeout": state.config.timeout_ms,
        "interval": state.config.interval_ms,
    }


def _connect_reply(state: PushState, ok: bool, reconnect: str = "retry", error: str | None = None) -> BayeuxMessage:
    return BayeuxMessage(
        channel=CONNECT, successful=ok, advice=_advice(state, reconnect), error=error
    )


async def handle_cometd(request: web.Request) -> web.Response:
    state: PushState = request.app[STATE_KEY]
    try:
        batch = decode_batch(await request.read())
    except DecodeError as e:
        return web.json_response({"error": str(e)}, status=400)

    responses: list[BayeuxMessage] = []
    hold_session: Session | None = None
    only_connect = len(batch) == 1 and batch[0].channel == CONNECT

    for msg in batch:
        ch = msg.channel
        if ch == HANDSHAKE:
            state.handshakes += 1
            session = state.create_session()
            responses.append(
                BayeuxMessage(
                    channel=HANDSHAKE,
                    successful=True,
                    client_id=session.client_id,
                    version="1.0",
                    supported_connection_types=("long-polling",),
                    advice=_advice(state, "retry"),
                )
            )
        elif ch == CONNECT:
            state.connects += 1
            session = state.sessions.get(msg.client_id or "")
            if session is None:
                responses.append(_connect_reply(state, False, "handshake", error="unknown clientId"))
            elif msg.connection_type != "long-polling":
                responses.append(_connect_reply(state, False, error="unsupported connectionType"))
            else:
                session.last_seen_ms = now_ms()
                if session.outbox:
                    responses.extend(session.outbox)
                    state.delivers_sent += len(session.outbox)
                    session.outbox = []
                    responses.append(_connect_reply(state, True))
                elif only_connect:
                    hold_session = session
                else:
                    responses.append(_connect_reply(state, True))
        elif ch == SUBSCRIBE:
            state.subscribes += 1
            session = state.sessions.get(msg.client_id or "")
            if session is None:
                responses.append(
                    BayeuxMessage(
                        channel=SUBSCRIBE, successful=False,
                        subscription=msg.subscription,
                        advice=_advice(state, "handshake"), error="unknown clientId",
                    )
                )
                continue
            session.last_seen_ms = now_ms()
            try:
                if msg.subscription is None:
                    raise MalformedChannel("missing subscription")
                pattern = parse_channel(msg.subscription)
                if pattern.is_meta:
                    raise MalformedChannel("meta channels are not subscribable")
            except MalformedChannel as e:
                responses.append(
                    BayeuxMessage(
                        channel=SUBSCRIBE, successful=False,
                        subscription=msg.subscription, client_id=session.client_id,
                        error=str(e),
                    )
                )
                continue
            if pattern not in session.subscriptions:
                session.subscriptions.append(pattern)
            if session.first_sub_seq is None:
                session.first_sub_seq = state.next_sub_seq()
            responses.append(
                BayeuxMessage(
                    channel=SUBSCRIBE, successful=True,
                    subscription=pattern.raw, client_id=session.client_id,
                )
            )
        elif ch.is_meta:
            responses.append(BayeuxMessage(channel=ch, successful=False, error="unsupported meta channel"))
        else:
            # data publishes ride the dedicated endpoint, not the message bus
            responses.append(BayeuxMessage(channel=ch, successful=False, error="publish via POST /publish"))

    if hold_session is not None:
        # park until a publish, a replacement connect, or the sweep releases us
        if hold_session.held is not None:
            state.release_held(hold_session, [])
        held = Held(
            future=asyncio.get_running_loop().create_future(),
            deadline_ms=now_ms() + state.config.timeout_ms,
            reply=_connect_reply(state, True),
        )
        hold_session.held = held
        try:
            batch_out = await held.future
        except asyncio.CancelledError:
            # client went away mid-hold; forget the parked connect
            if hold_session.held is held:
                hold_session.held = None
            raise
        return web.Response(body=encode_batch(batch_out), content_type="application/json")

    return web.Response(body=encode_batch(responses), content_type="application/json")


async def handle_publish(request: web.Request) -> web.Response:
    state: PushState = request.app[STATE_KEY]
    try:
        obj = await request.json()
        if not isinstance(obj, dict):
            raise TypeError
        channel = parse_channel(obj["channel"])
        item_id = int(obj["id"])
        creation_ts = int(obj.get("creationTs", now_ms()))
        data = obj.get("data")
        if not isinstance(data, dict):
            raise TypeError
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError):
        return web.json_response({"error": "BadItem"}, status=400)
    except MalformedChannel:
        return web.json_response({"error": "MalformedChannel"}, status=400)
    if channel.is_pattern:
        return web.json_response({"error": "MalformedChannel"}, status=400)
    if channel.is_meta:
        return web.json_response({"error": "MetaChannel"}, status=400)

    state.publishes += 1
    deliver = BayeuxMessage(
        channel=channel, id=str(item_id), data=data, ext={"creationTs": creation_ts}
    )
    delivered = 0
    for session in state.subscribers_for(channel):
        delivered += 1
        if session.held is not None:
            state.delivers_sent += 1
            state.release_held(session, [deliver])
        else:
            if len(session.outbox) >= state.config.outbox_capacity:
                session.outbox.pop(0)  # oldest loses; arrival order is preserved
                session.dropped += 1
                state.dropped_total += 1
            session.outbox.append(deliver)
    return web.json_response({"delivered": delivered})


async def handle_counters(request: web.Request) -> web.Response:
    state: PushState = request.app[STATE_KEY]
    return web.json_response(state.counters())


async def _sweeper(app: web.Application):
    state: PushState = app[STATE_KEY]
    period = state.config.sweep_period_ms / 1000.0

    async def loop():
        while True:
            await asyncio.sleep(period)
            state.sweep(now_ms())

    task = asyncio.create_task(loop())
    yield
    task.cancel()
    try:
        await task
    except asyncio.CancelledError:
        pass
    # release anything still parked so shutdown does not hang on open polls
    for session in state.sessions.values():
        if session.held is not None:
            state.release_held(session, [])


STATE_KEY: web.AppKey[PushState] = web.AppKey("state", PushState)


def build_app(config: PushConfig | None = None, state: PushState | None = None) -> web.Application:
    app = web.Application()
    app[STATE_KEY] = state or PushState(config)
    app.add_routes(
        [
            web.post("/cometd", handle_cometd),
            web.post("/publish", handle_publish),
            web.get("/counters", handle_counters),
        ]
    )
    app.cleanup_ctx.append(_sweeper)
    return app


async def serve(stop, host: str, port: int, config: PushConfig) -> int:
    state = PushState(config)
    app = build_app(state=state)
    runner, bound = await start_site(app, host, port)
    print_ready(bound)
    try:
        await stop.wait()
    finally:
        # unpark all long polls first or cleanup blocks on live handlers
        for session in list(state.sessions.values()):
            if session.held is not None:
                state.release_held(session, [])
        await runner.cleanup()
    print_summary(state.counters())
    return 0
