"""Channel grammar, message codec, and the client-side session state machine.

Everything here is pure: no sockets, no clocks. The servers and the swarm build
on these pieces and stay thin.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

MAX_BATCH = 64

META_PREFIX = "meta"


class MalformedChannel(ValueError):
    """Channel string violates the grammar."""


class DecodeError(ValueError):
    """Wire bytes are not a valid message batch."""


class ProtocolViolation(RuntimeError):
    """Event is not legal in the session's current phase."""


# ---------------------------------------------------------------------------
# channels


@dataclass(frozen=True)
class ChannelName:
    """A validated channel: absolute, slash-separated, non-empty segments.

    Wildcards: '*' matches exactly one segment and may appear anywhere as a
    whole segment; '**' matches one or more segments and is only legal as the
    final segment. Wildcards glued to text ("/a*/b") are malformed.
    """

    segments: tuple[str, ...]

    @property
    def raw(self) -> str:
        return "/" + "/".join(self.segments)

    @property
    def is_meta(self) -> bool:
        return self.segments[0] == META_PREFIX

    @property
    def is_pattern(self) -> bool:
        return any(s in ("*", "**") for s in self.segments)

    def __str__(self) -> str:
        return self.raw


def parse_channel(raw: str) -> ChannelName:
    if not isinstance(raw, str) or not raw.startswith("/"):
        raise MalformedChannel(f"channel must start with '/': {raw!r}")
    body = raw[1:]
    if not body:
        raise MalformedChannel("channel has no segments")
    segments = body.split("/")
    for i, seg in enumerate(segments):
        if not seg:
            raise MalformedChannel(f"empty segment in {raw!r}")
        if seg == "**":
            if i != len(segments) - 1:
                raise MalformedChannel(f"'**' only legal as final segment: {raw!r}")
        elif "*" in seg and seg != "*":
            # no glued wildcards like "a*" or "*b"
            raise MalformedChannel(f"wildcard must be a whole segment: {raw!r}")
    return ChannelName(tuple(segments))


def channel_matches(pattern: ChannelName, concrete: ChannelName) -> bool:
    """True when `pattern` covers `concrete`. `concrete` must be wildcard-free."""
    if concrete.is_pattern:
        raise MalformedChannel(f"match target may not contain wildcards: {concrete.raw!r}")
    pseg, cseg = pattern.segments, concrete.segments
    for i, p in enumerate(pseg):
        if p == "**":
            # final segment by construction; needs one or more segments left
            return len(cseg) >= i + 1
        if i >= len(cseg):
            return False
        if p != "*" and p != cseg[i]:
            return False
    return len(pseg) == len(cseg)


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class BayeuxMessage:
    """One protocol message. Fields not used by a given channel stay None.

    `id` is the published item id as a decimal string on delivers; meta
    replies reuse whatever the request carried. `ext` carries creationTs on
    delivers. Unknown wire fields are dropped on decode.
    """

    channel: ChannelName
    client_id: str | None = None
    successful: bool | None = None
    subscription: str | None = None
    connection_type: str | None = None
    version: str | None = None
    supported_connection_types: tuple[str, ...] | None = None
    advice: dict[str, Any] | None = None
    data: dict[str, Any] | None = None
    id: str | None = None
    ext: dict[str, Any] | None = None
    error: str | None = None

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"channel": self.channel.raw}
        if self.client_id is not None:
            out["clientId"] = self.client_id
        if self.successful is not None:
            out["successful"] = self.successful
        if self.subscription is not None:
            out["subscription"] = self.subscription
        if self.connection_type is not None:
            out["connectionType"] = self.connection_type
        if self.version is not None:
            out["version"] = self.version
        if self.supported_connection_types is not None:
            out["supportedConnectionTypes"] = list(self.supported_connection_types)
        if self.advice is not None:
            out["advice"] = self.advice
        if self.data is not None:
            out["data"] = self.data
        if self.id is not None:
            out["id"] = self.id
        if self.ext is not None:
            out["ext"] = self.ext
        if self.error is not None:
            out["error"] = self.error
        return out


def message_from_wire(obj: Any) -> BayeuxMessage:
    if not isinstance(obj, dict):
        raise DecodeError(f"message must be an object, got {type(obj).__name__}")
    raw_channel = obj.get("channel")
    if raw_channel is None:
        raise DecodeError("message missing 'channel'")
    try:
        channel = parse_channel(raw_channel)
    except MalformedChannel as e:
        raise DecodeError(str(e)) from e

    sct = obj.get("supportedConnectionTypes")
    msg_id = obj.get("id")
    if msg_id is not None and not isinstance(msg_id, str):
        msg_id = str(msg_id)
    return BayeuxMessage(
        channel=channel,
        client_id=obj.get("clientId"),
        successful=obj.get("successful"),
        subscription=obj.get("subscription"),
        connection_type=obj.get("connectionType"),
        version=obj.get("version"),
        supported_connection_types=tuple(sct) if isinstance(sct, list) else None,
        advice=obj.get("advice") if isinstance(obj.get("advice"), dict) else None,
        data=obj.get("data") if isinstance(obj.get("data"), dict) else None,
        id=msg_id,
        ext=obj.get("ext") if isinstance(obj.get("ext"), dict) else None,
        error=obj.get("error"),
    )


def encode_batch(messages: Iterable[BayeuxMessage]) -> bytes:
    batch = [m.to_wire() for m in messages]
    if not batch:
        raise ValueError("refusing to encode an empty batch")
    if len(batch) > MAX_BATCH:
        raise ValueError(f"batch of {len(batch)} exceeds cap of {MAX_BATCH}")
    return json.dumps(batch, separators=(",", ":")).encode()


def decode_batch(payload: bytes | str) -> list[BayeuxMessage]:
    try:
        parsed = json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DecodeError(f"batch is not valid JSON: {e}") from e
    if not isinstance(parsed, list):
        raise DecodeError("batch must be a JSON array")
    if not parsed:
        raise DecodeError("batch must not be empty")
    if len(parsed) > MAX_BATCH:
        raise DecodeError(f"batch of {len(parsed)} exceeds cap of {MAX_BATCH}")
    return [message_from_wire(obj) for obj in parsed]


# ---------------------------------------------------------------------------
# client session state machine


class Phase(Enum):
    UNCONNECTED = "unconnected"
    HANDSHAKEN = "handshaken"
    CONNECTED = "connected"


class Action(Enum):
    RECONNECT = "reconnect"
    REHANDSHAKE = "rehandshake"
    RECORD_RECEIPT = "record_receipt"


class Event:
    """Marker base for FSM inputs."""


@dataclass(frozen=True)
class SendHandshake(Event):
    pass


@dataclass(frozen=True)
class RecvHandshakeOk(Event):
    client_id: str


@dataclass(frozen=True)
class SendConnect(Event):
    pass


@dataclass(frozen=True)
class RecvConnectReply(Event):
    advice_reconnect: str | None = None


@dataclass(frozen=True)
class SendSubscribe(Event):
    channel: str


@dataclass(frozen=True)
class RecvSubscribeOk(Event):
    channel: str


@dataclass(frozen=True)
class RecvDeliver(Event):
    message: BayeuxMessage


@dataclass(frozen=True)
class RecvAdviceHandshake(Event):
    pass


@dataclass(frozen=True)
class ClientSessionState:
    phase: Phase = Phase.UNCONNECTED
    client_id: str | None = None
    subscriptions: frozenset[str] = field(default_factory=frozenset)


def step(state: ClientSessionState, event: Event) -> tuple[ClientSessionState, list[Action]]:
    """Advance the session. Raises ProtocolViolation on out-of-phase events,
    leaving `state` unchanged (it is immutable anyway)."""
    phase = state.phase

    if isinstance(event, RecvAdviceHandshake):
        # legal from any phase: server told us to start over
        return ClientSessionState(), [Action.REHANDSHAKE]

    if isinstance(event, SendHandshake):
        if phase is not Phase.UNCONNECTED:
            raise ProtocolViolation(f"send_handshake in {phase.value}")
        return state, []

    if isinstance(event, RecvHandshakeOk):
        if phase is not Phase.UNCONNECTED:
            raise ProtocolViolation(f"recv_handshake_ok in {phase.value}")
        return replace(state, phase=Phase.HANDSHAKEN, client_id=event.client_id), []

    if isinstance(event, SendConnect):
        if phase is Phase.UNCONNECTED:
            raise ProtocolViolation("send_connect before handshake")
        return state, []

    if isinstance(event, RecvConnectReply):
        if phase is Phase.UNCONNECTED:
            raise ProtocolViolation("recv_connect_reply before handshake")
        return replace(state, phase=Phase.CONNECTED), [Action.RECONNECT]

    if isinstance(event, SendSubscribe):
        if phase is Phase.UNCONNECTED:
            raise ProtocolViolation("send_subscribe before handshake")
        return state, []

    if isinstance(event, RecvSubscribeOk):
        if phase is Phase.UNCONNECTED:
            raise ProtocolViolation("recv_subscribe_ok before handshake")
        return replace(state, subscriptions=state.subscriptions | {event.channel}), []

    if isinstance(event, RecvDeliver):
        # delivers only ride connect responses, so we must be past handshake
        if phase is Phase.UNCONNECTED:
            raise ProtocolViolation("recv_deliver before handshake")
        return state, [Action.RECORD_RECEIPT]

    raise ProtocolViolation(f"unknown event {event!r}")
