"""Asynchronous message channels, named-channel connection managers and the
third-party wiring protocol.

A :class:`ChannelEnd` owns an inbox of received messages and an outbox of
messages not yet handed to a peer. While unbound, writes accumulate in the
outbox (up to ``capacity``, then block) and reads block. Binding attaches the
end to a framed connection; a pump thread feeds the inbox and the outbox is
flushed in order. A message leaves the outbox only after it has been sent,
so unbinding and rebinding neither loses nor duplicates anything.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass

from . import frames
from .errors import (
    AlreadyBound,
    ChannelClosed,
    ConnectionRefused,
    NotBound,
    ProtocolError,
    TransportError,
    WireFailed,
)

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1024
DEFAULT_LISTEN_TIMEOUT = 30.0
HANDSHAKE_TIMEOUT = 10.0


@dataclass(frozen=True)
class Connector:
    ip: str
    machine_port: int
    resource_port: int

    def __str__(self) -> str:
        return f"{self.ip}-{self.machine_port}-{self.resource_port}"

    @classmethod
    def parse(cls, text: str) -> "Connector":
        ip, sep1, rest = text.strip().rpartition("-")
        ip, sep2, machine = ip.rpartition("-")
        if not (sep1 and sep2 and ip and machine.isdigit() and rest.isdigit()):
            raise ValueError(f"not a connector (<ip>-<machine port>-<resource port>): {text!r}")
        return cls(ip, int(machine), int(rest))


class _Link:
    """The connection a bound end is attached to."""

    def __init__(self, conn):
        self.conn = conn
        self.detached = False

    def send(self, tag: int, payload: bytes = b"") -> None:
        self.conn.send(bytes([tag]) + payload)


class ChannelEnd:
    def __init__(self, name: str = "", capacity: int = DEFAULT_CAPACITY, rebindable: bool = False):
        self.name = name
        self.capacity = capacity
        # named channels survive their peer going away; default channels close
        self.rebindable = rebindable
        self._cond = threading.Condition()
        self._flush_lock = threading.Lock()
        self._inbox: deque[bytes] = deque()
        self._outbox: deque[bytes] = deque()
        self._link: _Link | None = None
        self._closed = False
        self._peer_closed = False

    def __repr__(self) -> str:
        state = "closed" if self._closed else "bound" if self.bound else "unbound"
        return f"<ChannelEnd {self.name or '?'} {state}>"

    @property
    def bound(self) -> bool:
        return self._link is not None

    @property
    def closed(self) -> bool:
        return self._closed

    def pending(self) -> int:
        with self._cond:
            return len(self._outbox)

    # -- user operations -------------------------------------------------

    def write(self, msg: bytes | str, timeout: float | None = None) -> None:
        if isinstance(msg, str):
            msg = msg.encode("utf-8")
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._closed or self._peer_closed or len(self._outbox) < self.capacity,
                timeout,
            )
            if self._closed or self._peer_closed:
                raise ChannelClosed(f"channel {self.name or '?'} is closed")
            if not ok:
                raise TimeoutError("channel buffer full")
            self._outbox.append(bytes(msg))
        self._flush()

    def read(self, timeout: float | None = None) -> bytes:
        with self._cond:
            self._cond.wait_for(lambda: self._inbox or self._closed or self._peer_closed, timeout)
            if self._inbox:
                msg = self._inbox.popleft()
                self._cond.notify_all()
                return msg
            if self._closed or self._peer_closed:
                raise ChannelClosed(f"channel {self.name or '?'} is closed")
            raise TimeoutError("no message within timeout")

    def read_str(self, timeout: float | None = None) -> str:
        return self.read(timeout).decode("utf-8")

    # camelCase aliases for bundle code written against the original API
    writeString = write
    getString = read_str

    def close(self) -> None:
        """Close this end. Messages already written are still delivered: if
        the end is unbound they linger until the next :meth:`attach`."""
        with self._cond:
            if self._closed:
                return
            self._closed = True
            self._cond.notify_all()
        self._flush()
        self._finish_close()

    def _finish_close(self) -> None:
        with self._flush_lock:
            with self._cond:
                if self._outbox and self._link is None:
                    return
                link, self._link = self._link, None
                self._outbox.clear()
            if link is not None:
                self._send_close(link)

    def _send_close(self, link: _Link) -> None:
        link.detached = True
        try:
            link.send(frames.TAG_CLOSE)
        except TransportError:
            pass
        link.conn.close()

    # -- binding ---------------------------------------------------------

    def attach(self, conn) -> None:
        with self._cond:
            closed = self._closed
            lingering = list(self._outbox) if closed else []
            if closed:
                self._outbox.clear()
        if closed:
            link = _Link(conn)
            try:
                for msg in lingering:
                    link.send(frames.TAG_DATA, msg)
            except TransportError:
                pass
            self._send_close(link)
            return
        with self._cond:
            if self._link is not None:
                raise AlreadyBound(f"channel {self.name or '?'} is already bound")
            link = self._link = _Link(conn)
            self._peer_closed = False
        threading.Thread(target=self._pump, args=(link,), daemon=True, name=f"pump {self.name}").start()
        self._flush()
        if self._closed:
            self._finish_close()

    def detach(self) -> None:
        """Dissolve the binding; the peer is told and acknowledges."""
        with self._flush_lock:
            with self._cond:
                link, self._link = self._link, None
                if link is None:
                    raise NotBound(f"channel {self.name or '?'} is not bound")
            link.detached = True
            try:
                link.send(frames.TAG_UNBIND)
            except TransportError:
                link.conn.close()

    def _flush(self) -> None:
        with self._flush_lock:
            while True:
                with self._cond:
                    link = self._link
                    if link is None or not self._outbox:
                        return
                    msg = self._outbox[0]
                try:
                    link.send(frames.TAG_DATA, msg)
                except TransportError:
                    self._lost(link)
                    return
                with self._cond:
                    self._outbox.popleft()
                    self._cond.notify_all()

    def _lost(self, link: _Link) -> None:
        with self._cond:
            if self._link is link:
                self._link = None
                if not self.rebindable:
                    self._peer_closed = True
            self._cond.notify_all()
        link.conn.close()

    def _deliver(self, msg: bytes) -> None:
        with self._cond:
            self._cond.wait_for(lambda: self._closed or len(self._inbox) < self.capacity)
            if not self._closed:
                self._inbox.append(msg)
                self._cond.notify_all()

    def _pump(self, link: _Link) -> None:
        conn = link.conn
        while True:
            try:
                payload = conn.recv()
            except (TransportError, OSError):
                if not link.detached:
                    self._lost(link)
                else:
                    conn.close()
                return
            tag = payload[0] if payload else None
            if tag == frames.TAG_DATA:
                self._deliver(payload[1:])
            elif tag == frames.TAG_CLOSE:
                self._lost(link)
                return
            elif tag == frames.TAG_UNBIND:
                with self._flush_lock:
                    with self._cond:
                        if self._link is link:
                            self._link = None
                    link.detached = True
                    try:
                        link.send(frames.TAG_UNBIND_ACK)
                    except TransportError:
                        pass
                conn.close()
                return
            elif tag == frames.TAG_UNBIND_ACK:
                conn.close()
                return
            else:
                log.warning("channel %s: dropping unexpected frame tag %r", self.name, tag)


def channel_pair(name: str = "", capacity: int = DEFAULT_CAPACITY) -> tuple[ChannelEnd, ChannelEnd]:
    """Two ends joined by an in-memory pipe."""
    from .transport import memory_pipe

    a, b = memory_pipe()
    left, right = ChannelEnd(name, capacity), ChannelEnd(name, capacity)
    left.attach(a)
    right.attach(b)
    return left, right


class RawChannel:
    """Channel interface over a plain byte stream to a conventional peer.

    Writes go out as raw bytes with no framing; reads return whatever chunk
    the stream yields.
    """

    def __init__(self, stream, name: str = "raw"):
        self.name = name
        self._stream = stream
        self._closed = False

    def write(self, msg: bytes | str, timeout: float | None = None) -> None:
        if isinstance(msg, str):
            msg = msg.encode("utf-8")
        if self._closed:
            raise ChannelClosed("raw channel is closed")
        try:
            self._stream.sendall(msg)
        except TransportError:
            raise ChannelClosed("raw peer went away") from None

    def read(self, timeout: float | None = None) -> bytes:
        if self._closed:
            raise ChannelClosed("raw channel is closed")
        data = self._stream.recv(65536, timeout)
        if not data:
            raise ChannelClosed("raw peer closed the stream")
        return data

    def read_str(self, timeout: float | None = None) -> str:
        return self.read(timeout).decode("utf-8")

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._stream.close()


# -- connection manager --------------------------------------------------------


class ConnectionManager:
    """Per-machine table of named channels and the listen/connect operations
    that bind them across machines."""

    def __init__(
        self,
        transport,
        node_id: str,
        listen_timeout: float = DEFAULT_LISTEN_TIMEOUT,
        capacity: int = DEFAULT_CAPACITY,
    ):
        self.transport = transport
        self.node_id = node_id
        self.listen_timeout = listen_timeout
        self.capacity = capacity
        self._lock = threading.Lock()
        self._channels: dict[str, ChannelEnd] = {}
        self._pending: dict[str, tuple[object, threading.Timer]] = {}
        self._closed = False

    def get_abstract_channel(self, name: str) -> ChannelEnd:
        if not name:
            raise ValueError("channel names are non-empty")
        with self._lock:
            end = self._channels.get(name)
            if end is None:
                end = self._channels[name] = ChannelEnd(name, self.capacity, rebindable=True)
            return end

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._channels)

    def is_pending(self, name: str) -> bool:
        with self._lock:
            return name in self._pending

    def listen_for_connection(self, name: str) -> int:
        end = self.get_abstract_channel(name)
        with self._lock:
            if end.bound or name in self._pending:
                raise AlreadyBound(f"channel {name!r} is bound or already awaiting a binding")
            server_box: list = []
            server = self.transport.serve(0, lambda conn: self._accept(name, server_box[0], conn))
            server_box.append(server)
            timer = threading.Timer(self.listen_timeout, self._expire, args=(name, server))
            timer.daemon = True
            self._pending[name] = (server, timer)
            timer.start()
            return server.port

    # camelCase alias
    listenForConnectionAndBindToChannel = listen_for_connection

    def _expire(self, name: str, server) -> None:
        with self._lock:
            entry = self._pending.get(name)
            if entry is None or entry[0] is not server:
                return
            del self._pending[name]
        server.close()
        log.info("listener for %s expired", name)

    def cancel_listen(self, name: str) -> bool:
        with self._lock:
            entry = self._pending.pop(name, None)
        if entry is None:
            return False
        entry[1].cancel()
        entry[0].close()
        return True

    def _accept(self, name: str, server, conn) -> None:
        try:
            hello = frames.decode_frame(conn.recv(HANDSHAKE_TIMEOUT))
        except (TransportError, TimeoutError, ProtocolError):
            conn.close()
            return
        if hello.type != frames.HELLO:
            conn.close()
            return
        with self._lock:
            entry = self._pending.get(name)
            if entry is None or entry[0] is not server:
                entry = None
            else:
                del self._pending[name]
        if entry is None:
            try:
                conn.send(hello.error(AlreadyBound(f"listener for {name!r} is no longer waiting")).encode())
            finally:
                conn.close()
            return
        entry[1].cancel()
        server.close()
        try:
            conn.send(hello.reply(node_id=self.node_id, channel=name).encode())
            self.get_abstract_channel(name).attach(conn)
        except (TransportError, AlreadyBound):
            conn.close()

    def connect_to_name(self, host: str, port: int, name: str) -> bool:
        end = self.get_abstract_channel(name)
        with self._lock:
            if end.bound:
                raise AlreadyBound(f"channel {name!r} is already bound")
        try:
            conn = self.transport.connect(host, int(port))
        except ConnectionRefused:
            return False
        try:
            frames.exchange(
                conn, frames.request(frames.HELLO, node_id=self.node_id, channel=name), HANDSHAKE_TIMEOUT
            )
        except AlreadyBound:
            conn.close()
            return False
        except (TransportError, TimeoutError):
            conn.close()
            return False
        try:
            end.attach(conn)
        except AlreadyBound:
            conn.close()
            raise
        return True

    # camelCase aliases
    connectChannelToName = connect_to_name
    connectToChannelName = connect_to_name

    def unbind(self, name: str) -> None:
        with self._lock:
            end = self._channels.get(name)
        if end is None:
            raise NotBound(f"channel {name!r} is not bound")
        end.detach()

    def close(self) -> None:
        with self._lock:
            self._closed = True
            pending = list(self._pending.values())
            self._pending.clear()
            channels = list(self._channels.values())
        for server, timer in pending:
            timer.cancel()
            server.close()
        for end in channels:
            end.close()


def wire_third_party(
    transport, primary: Connector, primary_name: str, secondary: Connector, secondary_name: str
) -> None:
    """Connect ``primary_name`` in the primary machine to ``secondary_name`` in
    the secondary machine, driving both connection managers from outside.

    LISTEN goes to the primary; the port it returns is handed to the secondary
    in a CONNECT, and the secondary dials the primary. On any failure the
    primary's listener is cancelled and :class:`WireFailed` raised.
    """
    from .tsscp import client_machine_request

    try:
        reply = client_machine_request(
            transport, primary, frames.request(frames.CHANNEL_LISTEN, name=primary_name)
        )
        port = int(reply.get("port"))
    except Exception as exc:
        raise WireFailed(f"listen at {primary} failed: {exc}") from exc
    try:
        reply = client_machine_request(
            transport,
            secondary,
            frames.request(frames.CHANNEL_CONNECT, name=secondary_name, host=primary.ip, port=port),
        )
        if reply.get("ok") != "TRUE":
            raise WireFailed(f"{secondary} could not reach the listener")
    except Exception as exc:
        try:
            client_machine_request(transport, primary, frames.request(frames.CHANNEL_CANCEL, name=primary_name))
        except Exception:
            log.warning("could not cancel listener for %s at %s", primary_name, primary)
        if isinstance(exc, WireFailed):
            raise
        raise WireFailed(f"connect at {secondary} failed: {exc}") from exc
