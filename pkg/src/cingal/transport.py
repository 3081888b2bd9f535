"""Frame transports: real TCP sockets and an in-memory simulated network.

Both expose the same surface: ``serve(port, handler)`` starts accepting
connections and runs ``handler(conn)`` on a thread per connection;
``connect(host, port)`` dials. Framed connections move whole frames (a 4-byte
big-endian length prefix on TCP). Raw streams are plain bytes, used for
conventional (non-node) peers.

The simulated network records every frame it carries in a :class:`TraceEvent`
log so protocol tests can assert on exact exchanges.
"""

from __future__ import annotations

import errno
import itertools
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable

from .errors import ConnectionRefused, HostUnreachable, PortInUse, ProtocolError, TransportError

HEADER = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024
SIM_PREFIX = "sim://"


class ConnectionClosedError(TransportError):
    pass


def _spawn(target, *args, name: str | None = None) -> threading.Thread:
    thread = threading.Thread(target=target, args=args, name=name, daemon=True)
    thread.start()
    return thread


class Server:
    def __init__(self, host: str, port: int, closer: Callable[[], None]):
        self.host = host
        self.port = port
        self._closer = closer
        self._closed = False

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._closer()


# -- simulated network ---------------------------------------------------------


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    src: str
    dst: str
    server_port: int
    from_dialer: bool
    frame: bytes


_EOF = object()


class SimConnection:
    """One end of an in-memory frame pipe."""

    def __init__(self, local: str, remote: str, server_port: int, from_dialer: bool, tracer=None):
        self.local = local
        self.remote = remote
        self.server_port = server_port
        self._from_dialer = from_dialer
        self._tracer = tracer
        self._inbox: queue.Queue = queue.Queue()
        self._peer: SimConnection | None = None
        self._closed = False
        self._send_lock = threading.Lock()

    def send(self, frame: bytes) -> None:
        with self._send_lock:
            if self._closed or self._peer is None:
                raise ConnectionClosedError("connection is closed")
            if len(frame) > MAX_FRAME:
                raise ProtocolError("frame too large")
            if self._tracer is not None:
                self._tracer(self.local, self.remote, self.server_port, self._from_dialer, frame)
            self._peer._inbox.put(frame)

    def recv(self, timeout: float | None = None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame within timeout") from None
        if item is _EOF:
            self._inbox.put(_EOF)
            raise ConnectionClosedError("peer closed the connection")
        return item

    def close(self) -> None:
        with self._send_lock:
            if self._closed:
                return
            self._closed = True
            peer = self._peer
        self._inbox.put(_EOF)
        if peer is not None:
            peer._inbox.put(_EOF)


def memory_pipe(a: str = "local", b: str = "local") -> tuple[SimConnection, SimConnection]:
    left = SimConnection(a, b, 0, True)
    right = SimConnection(b, a, 0, False)
    left._peer, right._peer = right, left
    return left, right


class SimRawStream:
    def __init__(self):
        self._inbox: queue.Queue = queue.Queue()
        self._peer: SimRawStream | None = None
        self._closed = False

    def sendall(self, data: bytes) -> None:
        if self._closed or self._peer is None or self._peer._closed:
            raise ConnectionClosedError("stream is closed")
        self._peer._inbox.put(bytes(data))

    def recv(self, limit: int = 65536, timeout: float | None = None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no data within timeout") from None
        if item is _EOF:
            self._inbox.put(_EOF)
            return b""
        if len(item) > limit:
            self._inbox.queue.appendleft(item[limit:])
            item = item[:limit]
        return item

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._inbox.put(_EOF)
        if self._peer is not None:
            self._peer._inbox.put(_EOF)


class SimulatedNetwork:
    """Registry of in-process hosts; the only state shared between nodes."""

    def __init__(self, first_port: int = 30000):
        self._lock = threading.Lock()
        self._hosts: set[str] = set()
        self._endpoints: dict[tuple[str, int], tuple[Callable, bool]] = {}
        self._ports: dict[str, itertools.count] = {}
        self._first_port = first_port
        self._seq = itertools.count()
        self.trace: list[TraceEvent] = []

    def add_host(self, host: str) -> "SimTransport":
        if not host.startswith(SIM_PREFIX):
            raise ValueError(f"simulated hosts use the {SIM_PREFIX} form, got {host!r}")
        with self._lock:
            self._hosts.add(host)
            self._ports.setdefault(host, itertools.count(self._first_port))
        return SimTransport(self, host)

    def transport(self, host: str) -> "SimTransport":
        return self.add_host(host)

    def remove_host(self, host: str) -> None:
        with self._lock:
            self._hosts.discard(host)
            for key in [k for k in self._endpoints if k[0] == host]:
                del self._endpoints[key]

    def _record(self, src, dst, server_port, from_dialer, frame) -> None:
        with self._lock:
            self.trace.append(TraceEvent(next(self._seq), src, dst, server_port, from_dialer, frame))

    def _serve(self, host: str, port: int, handler, raw: bool) -> Server:
        with self._lock:
            if host not in self._hosts:
                raise HostUnreachable(f"{host} is not on this network")
            if port == 0:
                port = next(self._ports[host])
                while (host, port) in self._endpoints:
                    port = next(self._ports[host])
            elif (host, port) in self._endpoints:
                raise PortInUse(f"{host}:{port} is already in use")
            self._endpoints[(host, port)] = (handler, raw)

        def closer():
            with self._lock:
                if self._endpoints.get((host, port), (None,))[0] is handler:
                    del self._endpoints[(host, port)]

        return Server(host, port, closer)

    def _lookup(self, src: str, host: str, port: int, raw: bool):
        with self._lock:
            if host not in self._hosts or src not in self._hosts:
                raise HostUnreachable(f"{host} is unreachable from {src}")
            found = self._endpoints.get((host, port))
        if found is None or found[1] != raw:
            raise ConnectionRefused(f"nothing listening on {host}:{port}")
        return found[0]

    def _connect(self, src: str, host: str, port: int) -> SimConnection:
        handler = self._lookup(src, host, port, raw=False)
        client = SimConnection(src, host, port, True, self._record)
        server = SimConnection(host, src, port, False, self._record)
        client._peer, server._peer = server, client
        _spawn(handler, server, name=f"sim {host}:{port}")
        return client

    def _connect_raw(self, src: str, host: str, port: int) -> SimRawStream:
        handler = self._lookup(src, host, port, raw=True)
        client, server = SimRawStream(), SimRawStream()
        client._peer, server._peer = server, client
        _spawn(handler, server, name=f"sim raw {host}:{port}")
        return client


class SimTransport:
    def __init__(self, network: SimulatedNetwork, host: str):
        self.network = network
        self.host = host

    def serve(self, port: int, handler, raw: bool = False) -> Server:
        return self.network._serve(self.host, port, handler, raw)

    def connect(self, host: str, port: int, timeout: float | None = None) -> SimConnection:
        return self.network._connect(self.host, host, port)

    def connect_raw(self, host: str, port: int, timeout: float | None = None) -> SimRawStream:
        return self.network._connect_raw(self.host, host, port)


# -- TCP -------------------------------------------------------------------------


class TcpConnection:
    def __init__(self, sock: socket.socket, local: str, remote: str):
        self.local = local
        self.remote = remote
        self._sock = sock
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self._closed = False

    def send(self, frame: bytes) -> None:
        if len(frame) > MAX_FRAME:
            raise ProtocolError("frame too large")
        with self._send_lock:
            if self._closed:
                raise ConnectionClosedError("connection is closed")
            try:
                self._sock.sendall(HEADER.pack(len(frame)) + frame)
            except OSError as exc:
                raise ConnectionClosedError(str(exc)) from None

    def _read_exact(self, size: int) -> bytes:
        chunks = []
        while size:
            chunk = self._sock.recv(size)
            if not chunk:
                raise ConnectionClosedError("peer closed the connection")
            chunks.append(chunk)
            size -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float | None = None) -> bytes:
        with self._recv_lock:
            try:
                self._sock.settimeout(timeout)
                (length,) = HEADER.unpack(self._read_exact(HEADER.size))
                if length > MAX_FRAME:
                    raise ProtocolError(f"frame of {length} bytes is too large")
                self._sock.settimeout(None)
                return self._read_exact(length)
            except socket.timeout:
                raise TimeoutError("no frame within timeout") from None
            except OSError as exc:
                if self._closed:
                    raise ConnectionClosedError("connection is closed") from None
                raise ConnectionClosedError(str(exc)) from None

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpRawStream:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def sendall(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionClosedError(str(exc)) from None

    def recv(self, limit: int = 65536, timeout: float | None = None) -> bytes:
        self._sock.settimeout(timeout)
        try:
            return self._sock.recv(limit)
        except socket.timeout:
            raise TimeoutError("no data within timeout") from None
        except OSError:
            return b""

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpTransport:
    def __init__(self, host: str = "127.0.0.1", connect_timeout: float = 5.0):
        self.host = host
        self.connect_timeout = connect_timeout

    def serve(self, port: int, handler, raw: bool = False) -> Server:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, port))
        except OSError as exc:
            sock.close()
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"{self.host}:{port} is already in use") from None
            raise HostUnreachable(str(exc)) from None
        sock.listen(64)
        bound = sock.getsockname()[1]

        def accept_loop():
            while True:
                try:
                    peer, addr = sock.accept()
                except OSError:
                    return
                peer.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn = TcpRawStream(peer) if raw else TcpConnection(peer, self.host, addr[0])
                _spawn(handler, conn, name=f"tcp {self.host}:{bound}")

        def closer():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

        _spawn(accept_loop, name=f"accept {self.host}:{bound}")
        return Server(self.host, bound, closer)

    def _dial(self, host: str, port: int, timeout: float | None) -> socket.socket:
        if host.startswith(SIM_PREFIX):
            raise HostUnreachable(f"{host} is a simulated address")
        try:
            sock = socket.create_connection((host, port), timeout=timeout or self.connect_timeout)
        except ConnectionRefusedError:
            raise ConnectionRefused(f"{host}:{port} refused the connection") from None
        except (socket.timeout, socket.gaierror, OSError) as exc:
            raise HostUnreachable(f"{host}:{port}: {exc}") from None
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def connect(self, host: str, port: int, timeout: float | None = None) -> TcpConnection:
        return TcpConnection(self._dial(host, port, timeout), self.host, host)

    def connect_raw(self, host: str, port: int, timeout: float | None = None) -> TcpRawStream:
        return TcpRawStream(self._dial(host, port, timeout))
