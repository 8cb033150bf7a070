"""Task/result envelopes and their length-prefixed wire frames.

A frame is ``u32le(header_len) | header (UTF-8 JSON) | payload bytes``. The
header carries every envelope field except inline payload bytes, whose
length is given by the header's ``payload_len``.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass, field
from typing import Union

from ..errors import LengthMismatch, MalformedHeader, Truncated

OK = "ok"
FAILED = "failed"


@dataclass(frozen=True)
class Inline:
    data: bytes = b""

    def __repr__(self):
        return f"Inline({len(self.data)} bytes)"


@dataclass(frozen=True)
class ObjectRef:
    key: str
    size: int
    crc32: int


PayloadRef = Union[Inline, ObjectRef]


@dataclass(frozen=True)
class TaskEnvelope:
    task_id: str
    function: str
    round: int
    config: dict
    payload: PayloadRef
    auth_token: str
    sender: str


@dataclass(frozen=True)
class ResultEnvelope:
    task_id: str
    client_id: str
    status: str
    payload: PayloadRef = field(default_factory=Inline)
    metrics: dict = field(default_factory=dict)
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == OK


@dataclass(frozen=True)
class Hello:
    endpoint_id: str


Envelope = Union[TaskEnvelope, ResultEnvelope, Hello]

_REQUIRED = {
    "task": ("task_id", "function", "round", "config", "auth_token", "sender"),
    "result": ("task_id", "client_id", "status", "metrics"),
    "hello": ("endpoint_id",),
}


def _payload_header(ref: PayloadRef) -> tuple[dict, bytes]:
    if isinstance(ref, ObjectRef):
        return {"type": "object", "key": ref.key, "size": ref.size, "crc32": ref.crc32}, b""
    return {"type": "inline"}, bytes(ref.data)


def encode_frame(envelope: Envelope) -> bytes:
    body = b""
    if isinstance(envelope, TaskEnvelope):
        payload, body = _payload_header(envelope.payload)
        header = {
            "kind": "task",
            "task_id": envelope.task_id,
            "function": envelope.function,
            "round": envelope.round,
            "config": envelope.config,
            "auth_token": envelope.auth_token,
            "sender": envelope.sender,
            "payload": payload,
        }
    elif isinstance(envelope, ResultEnvelope):
        payload, body = _payload_header(envelope.payload)
        header = {
            "kind": "result",
            "task_id": envelope.task_id,
            "client_id": envelope.client_id,
            "status": envelope.status,
            "reason": envelope.reason,
            "metrics": envelope.metrics,
            "payload": payload,
        }
    elif isinstance(envelope, Hello):
        header = {"kind": "hello", "endpoint_id": envelope.endpoint_id}
    else:
        raise TypeError(f"cannot frame {type(envelope).__name__}")
    header["payload_len"] = len(body)
    raw = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + body


def _parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")
    kind = header.get("kind")
    if kind not in _REQUIRED:
        raise MalformedHeader(f"unknown frame kind {kind!r}")
    missing = [k for k in _REQUIRED[kind] if k not in header]
    if missing:
        raise MalformedHeader(f"{kind} header lacks {', '.join(missing)}")
    plen = header.get("payload_len")
    if not isinstance(plen, int) or isinstance(plen, bool) or plen < 0:
        raise MalformedHeader(f"bad payload_len {plen!r}")
    return header


def _payload_from(header: dict, body: bytes) -> PayloadRef:
    spec = header.get("payload", {"type": "inline"})
    if not isinstance(spec, dict):
        raise MalformedHeader("payload descriptor must be an object")
    if spec.get("type") == "inline":
        return Inline(body)
    if spec.get("type") == "object":
        if body:
            raise LengthMismatch("object payloads carry no inline bytes")
        try:
            return ObjectRef(str(spec["key"]), int(spec["size"]), int(spec["crc32"]))
        except (KeyError, TypeError, ValueError):
            raise MalformedHeader(f"bad object reference {spec!r}") from None
    raise MalformedHeader(f"unknown payload type {spec.get('type')!r}")


def _build(header: dict, body: bytes) -> Envelope:
    kind = header["kind"]
    try:
        if kind == "hello":
            return Hello(str(header["endpoint_id"]))
        payload = _payload_from(header, body)
        if kind == "task":
            if not isinstance(header["config"], dict):
                raise MalformedHeader("task config must be an object")
            return TaskEnvelope(
                str(header["task_id"]), str(header["function"]), int(header["round"]),
                header["config"], payload, str(header["auth_token"]), str(header["sender"]),
            )
        if not isinstance(header["metrics"], dict):
            raise MalformedHeader("result metrics must be an object")
        return ResultEnvelope(
            str(header["task_id"]), str(header["client_id"]), str(header["status"]),
            payload, header["metrics"], header.get("reason"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (MalformedHeader, LengthMismatch)):
            raise
        raise MalformedHeader(str(exc)) from None


def decode_frame(data: bytes) -> Envelope:
    data = bytes(data)
    if len(data) < 4:
        raise Truncated("frame shorter than its length prefix")
    (hlen,) = struct.unpack("<I", data[:4])
    if 4 + hlen > len(data):
        raise Truncated(f"header declares {hlen} bytes, {len(data) - 4} available")
    header = _parse_header(data[4:4 + hlen])
    rest = len(data) - 4 - hlen
    plen = header["payload_len"]
    if plen > rest:
        raise Truncated(f"payload_len {plen} exceeds the {rest} remaining bytes")
    if plen < rest:
        raise LengthMismatch(f"{rest - plen} bytes follow the declared payload")
    return _build(header, data[4 + hlen:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise EOFError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Envelope:
    """Read one frame from a stream socket; raises EOFError on a clean close."""
    prefix = sock.recv(4, socket.MSG_WAITALL)
    if not prefix:
        raise EOFError("connection closed")
    if len(prefix) < 4:
        prefix += _recv_exact(sock, 4 - len(prefix))
    (hlen,) = struct.unpack("<I", prefix)
    raw = _recv_exact(sock, hlen)
    header = _parse_header(raw)
    body = _recv_exact(sock, header["payload_len"])
    return _build(header, body)
