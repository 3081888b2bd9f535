"""Thin Server Simple Communication Protocol: node listener and clients.

A node serves three kinds of endpoint:

* the standard port (default 2999): FIRE and RESOURCE_CONNECT. A FIRE session
  turns into the fired machine's default channel once FIRE_REPLY is sent.
* each machine's machine port: CHANNEL_LISTEN / CHANNEL_CONNECT /
  CHANNEL_CANCEL / CHANNEL_UNBIND, executed by the machine's connection
  manager.
* each machine's resource port: a HELLO/ACK handshake that opens a fresh
  channel to the machine (picked up with ``accept``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import frames
from .bundle import Bundle
from .channels import ChannelEnd, Connector
from .errors import (
    CingalError,
    ConnectionRefused,
    HostUnreachable,
    ProtocolError,
    TransportError,
)
from .transport import ConnectionClosedError

log = logging.getLogger(__name__)

DEFAULT_PORT = 2999
REQUEST_TIMEOUT = 30.0


def split_address(address: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    """``"host"`` or ``"host:port"`` (``sim://node-1:2999`` works too)."""
    address = address.strip()
    head, sep, tail = address.rpartition(":")
    if sep and tail.isdigit() and not head.endswith("/") and head not in ("", "sim"):
        return head, int(tail)
    return address, default_port


def join_address(host: str, port: int) -> str:
    return f"{host}:{port}"


@dataclass
class ClientHandle:
    """What a fire or resource connection hands back to its initiator."""

    channel: ChannelEnd
    connector: Connector | None = None

    def getResourceChannel(self) -> ChannelEnd:
        return self.channel


def _dial_node(transport, address: str, default_port: int = DEFAULT_PORT):
    host, port = split_address(address, default_port)
    try:
        return transport.connect(host, port)
    except ConnectionRefused as exc:
        raise HostUnreachable(f"no node listening at {host}:{port}") from exc


def client_send_fire(transport, address: str, bundle: Bundle, timeout: float = REQUEST_TIMEOUT) -> ClientHandle:
    """Fire ``bundle`` on the node at ``address``; the returned handle carries
    the fired machine's default channel and connector."""
    conn = _dial_node(transport, address)
    try:
        reply = frames.exchange(conn, frames.request(frames.FIRE, bundle), timeout)
    except BaseException:
        conn.close()
        raise
    end = ChannelEnd("default")
    end.attach(conn)
    return ClientHandle(end, Connector.parse(reply.get("connector", "")))


def client_resource_connect(
    transport, address: str, resource: str, provider: str = "", node_id: str = "client",
    timeout: float = REQUEST_TIMEOUT,
) -> ClientHandle:
    conn = _dial_node(transport, address)
    try:
        reply = frames.exchange(
            conn, frames.request(frames.RESOURCE_CONNECT, resource=resource, provider=provider), timeout
        )
    finally:
        conn.close()
    connector = Connector.parse(reply.get("connector", ""))
    return ClientHandle(open_resource_channel(transport, connector, node_id, resource), connector)


def open_resource_channel(transport, connector: Connector, node_id: str, resource: str = "") -> ChannelEnd:
    try:
        conn = transport.connect(connector.ip, connector.resource_port)
    except ConnectionRefused as exc:
        raise HostUnreachable(f"resource port of {connector} is closed") from exc
    try:
        frames.exchange(conn, frames.request(frames.HELLO, node_id=node_id, channel=resource), REQUEST_TIMEOUT)
    except BaseException:
        conn.close()
        raise
    end = ChannelEnd(resource or "resource")
    end.attach(conn)
    return end


def client_machine_request(transport, connector: Connector, frame: frames.Frame,
                           timeout: float = REQUEST_TIMEOUT) -> frames.Frame:
    """Send one channel request to the machine behind ``connector``."""
    if frame.type not in (
        frames.CHANNEL_LISTEN, frames.CHANNEL_CONNECT, frames.CHANNEL_CANCEL, frames.CHANNEL_UNBIND,
    ):
        raise ProtocolError(f"{frame.type} is not a machine-channel request")
    try:
        conn = transport.connect(connector.ip, connector.machine_port)
    except ConnectionRefused as exc:
        raise HostUnreachable(f"machine port of {connector} is closed") from exc
    try:
        return frames.exchange(conn, frame, timeout)
    finally:
        conn.close()


class NodeListener:
    """Frame handlers for one node's endpoints."""

    def __init__(self, node):
        self.node = node

    def _recv(self, conn):
        try:
            return frames.decode_frame(conn.recv())
        except (ConnectionClosedError, TransportError):
            return None

    def _reply(self, conn, frame: frames.Frame) -> bool:
        try:
            conn.send(frame.encode())
            return True
        except TransportError:
            return False

    def handle_standard(self, conn) -> None:
        while True:
            try:
                frame = self._recv(conn)
            except ProtocolError as exc:
                self._reply(conn, frames.error_frame(0, exc))
                break
            if frame is None:
                break
            if frame.type == frames.FIRE:
                if self._fire(conn, frame):
                    return  # the session is now the default channel
            elif frame.type == frames.RESOURCE_CONNECT:
                try:
                    machine = self.node.resolve_resource(frame.get("resource", ""), frame.get("provider", ""))
                    reply = frame.reply(connector=str(machine.connector))
                except CingalError as exc:
                    reply = frame.error(exc)
                if not self._reply(conn, reply):
                    break
            else:
                exc = ProtocolError(f"{frame.type} is not accepted on the standard port")
                if not self._reply(conn, frame.error(exc)):
                    break
        conn.close()

    def _fire(self, conn, frame: frames.Frame) -> bool:
        try:
            if frame.bundle is None:
                raise ProtocolError("FIRE frame carries no bundle")
            # the gate: nothing from the wire is fired without a verified entity
            entity = self.node.state.ver_verify(frame.bundle)
            machine = self.node.spawn(frame.bundle, entity)
        except CingalError as exc:
            self._reply(conn, frame.error(exc))
            return False
        if self._reply(conn, frame.reply(connector=str(machine.connector))):
            machine.default.attach(conn)
        else:
            machine.default.close()
        machine.start()
        return True

    def handle_machine(self, machine, conn) -> None:
        cm = machine.cm
        while True:
            try:
                frame = self._recv(conn)
            except ProtocolError as exc:
                self._reply(conn, frames.error_frame(0, exc))
                break
            if frame is None:
                break
            try:
                if frame.type == frames.CHANNEL_LISTEN:
                    reply = frame.reply(port=cm.listen_for_connection(frame.get("name", "")))
                elif frame.type == frames.CHANNEL_CONNECT:
                    ok = cm.connect_to_name(frame.get("host", ""), int(frame.get("port", "0")), frame.get("name", ""))
                    reply = frame.reply(ok="TRUE" if ok else "FALSE")
                elif frame.type == frames.CHANNEL_CANCEL:
                    reply = frame.reply(ok="TRUE" if cm.cancel_listen(frame.get("name", "")) else "FALSE")
                elif frame.type == frames.CHANNEL_UNBIND:
                    cm.unbind(frame.get("name", ""))
                    reply = frame.reply(ok="TRUE")
                else:
                    raise ProtocolError(f"{frame.type} is not accepted on a machine port")
            except (CingalError, ValueError) as exc:
                reply = frame.error(exc)
            if not self._reply(conn, reply):
                break
        conn.close()

    def handle_resource(self, machine, conn) -> None:
        try:
            frame = self._recv(conn)
        except ProtocolError:
            frame = None
        if frame is None or frame.type != frames.HELLO:
            conn.close()
            return
        end = ChannelEnd(frame.get("channel", "") or "resource")
        if not self._reply(conn, frame.reply(node_id=self.node.node_id, channel=end.name)):
            conn.close()
            return
        end.attach(conn)
        machine.offer(end)
