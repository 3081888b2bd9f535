"""TSSCP frame codec.

A frame on the wire is a 4-byte big-endian length (added by the transport)
followed by a one-byte tag. Tag ``0x01`` is a protocol document in version 1
of the format; tags ``0x10``-``0x13`` are channel-stream frames that follow a
completed HELLO/ACK handshake. See docs/protocol.md for the exact layout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from . import xmldoc
from .bundle import Bundle, bundle_to_xml, decode_element
from .errors import CingalError, MalformedDocument, ProtocolError, from_wire

TAG_TSSCP = 0x01
TAG_DATA = 0x10
TAG_CLOSE = 0x11
TAG_UNBIND = 0x12
TAG_UNBIND_ACK = 0x13

FIRE = "FIRE"
FIRE_REPLY = "FIRE_REPLY"
RESOURCE_CONNECT = "RESOURCE_CONNECT"
RESOURCE_REPLY = "RESOURCE_REPLY"
CHANNEL_LISTEN = "CHANNEL_LISTEN"
LISTEN_REPLY = "LISTEN_REPLY"
CHANNEL_CONNECT = "CHANNEL_CONNECT"
CONNECT_REPLY = "CONNECT_REPLY"
CHANNEL_CANCEL = "CHANNEL_CANCEL"
CANCEL_REPLY = "CANCEL_REPLY"
CHANNEL_UNBIND = "CHANNEL_UNBIND"
UNBIND_REPLY = "UNBIND_REPLY"
HELLO = "HELLO"
ACK = "ACK"
ERROR = "ERROR"

REPLIES = {
    FIRE: FIRE_REPLY,
    RESOURCE_CONNECT: RESOURCE_REPLY,
    CHANNEL_LISTEN: LISTEN_REPLY,
    CHANNEL_CONNECT: CONNECT_REPLY,
    CHANNEL_CANCEL: CANCEL_REPLY,
    CHANNEL_UNBIND: UNBIND_REPLY,
    HELLO: ACK,
}
FRAME_TYPES = frozenset(REPLIES) | frozenset(REPLIES.values()) | {ERROR}

_cids = itertools.count(1)


def next_cid() -> int:
    return next(_cids)


@dataclass(frozen=True)
class Frame:
    type: str
    cid: int = 0
    fields: dict[str, str] = field(default_factory=dict)
    bundle: Bundle | None = None

    def __post_init__(self):
        if self.type not in FRAME_TYPES:
            raise ProtocolError(f"unknown frame type {self.type!r}")

    def get(self, name: str, default: str | None = None) -> str | None:
        return self.fields.get(name, default)

    def reply(self, type: str | None = None, bundle: Bundle | None = None, **fields) -> "Frame":
        return Frame(type or REPLIES[self.type], self.cid, {k: str(v) for k, v in fields.items()}, bundle)

    def error(self, exc: BaseException) -> "Frame":
        return error_frame(self.cid, exc)

    def encode(self) -> bytes:
        children = [
            xmldoc.element("field", {"name": k}, text=v) for k, v in sorted(self.fields.items())
        ]
        if self.bundle is not None:
            children.append(bundle_to_xml(self.bundle))
        body = xmldoc.element("TSSCP", {"cid": str(self.cid), "type": self.type}, children)
        return bytes([TAG_TSSCP]) + body.encode("utf-8")


def request(type: str, bundle: Bundle | None = None, **fields) -> Frame:
    return Frame(type, next_cid(), {k: str(v) for k, v in fields.items()}, bundle)


def error_frame(cid: int, exc: BaseException) -> Frame:
    code = getattr(exc, "code", 500) if isinstance(exc, CingalError) else 500
    name = getattr(exc, "name", None) or type(exc).__name__
    return Frame(ERROR, cid, {"code": str(code), "error": name, "message": str(exc)})


def decode_frame(payload: bytes) -> Frame:
    if not payload or payload[0] != TAG_TSSCP:
        raise ProtocolError("not a TSSCP document frame")
    try:
        root = xmldoc.parse(payload[1:], "TSSCP")
        type = xmldoc.require(root, "type")
        cid = int(xmldoc.require(root, "cid"))
        fields: dict[str, str] = {}
        bundle = None
        xmldoc.check_no_stray_text(root)
        for child in root:
            if child.tag == "field":
                fields[xmldoc.require(child, "name")] = child.text or ""
            elif child.tag == "BUNDLE" and bundle is None:
                bundle = decode_element(child)
            else:
                raise MalformedDocument(f"unexpected <{child.tag}> in frame")
    except (MalformedDocument, ValueError) as exc:
        raise ProtocolError(f"bad frame: {exc}") from None
    return Frame(type, cid, fields, bundle)


def raise_for_error(frame: Frame) -> Frame:
    if frame.type == ERROR:
        raise from_wire(int(frame.get("code", "500")), frame.get("error", "RemoteError"), frame.get("message", ""))
    return frame


def exchange(conn, frame: Frame, timeout: float | None = None) -> Frame:
    """Send a request on ``conn`` and return its matching reply (or raise)."""
    conn.send(frame.encode())
    reply = decode_frame(conn.recv(timeout))
    if reply.cid != frame.cid:
        raise ProtocolError(f"reply cid {reply.cid} does not match request {frame.cid}")
    raise_for_error(reply)
    if reply.type != REPLIES[frame.type]:
        raise ProtocolError(f"expected {REPLIES[frame.type]}, got {reply.type}")
    return reply


def describe(payload: bytes) -> tuple[str, Frame | None]:
    """Classify a raw frame for traces: ('TSSCP', frame) or ('DATA', None) etc."""
    if not payload:
        return "EMPTY", None
    tag = payload[0]
    if tag == TAG_TSSCP:
        try:
            return "TSSCP", decode_frame(payload)
        except ProtocolError:
            return "BAD", None
    return {TAG_DATA: "DATA", TAG_CLOSE: "CLOSE", TAG_UNBIND: "UNBIND", TAG_UNBIND_ACK: "UNBIND_ACK"}.get(
        tag, "UNKNOWN"
    ), None
