"""Interchangeable frame transports: in-process queues and TCP sockets.

Both provide ordered, reliable delivery of whole frames with identical
semantics, so protocol results depend only on config and seeds. Failures
surface as ConnectionLost/RecvTimeout for the protocol layer to roll back
the round in flight.
"""

from __future__ import annotations

import queue
import socket

from . import wire
from .wire import Frame


class TransportError(Exception):
    pass


class ConnectionLost(TransportError):
    pass


class RecvTimeout(TransportError):
    pass


DEFAULT_TIMEOUT = 30.0

_CLOSED = object()


class QueueConnection:
    """One endpoint of an in-process duplex channel."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, frame: Frame) -> None:
        if self._closed:
            raise ConnectionLost("send on closed connection")
        # encode/decode round trip keeps queue semantics identical to sockets
        self._outbox.put(wire.encode_frame(frame))

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> Frame:
        if self._closed:
            raise ConnectionLost("recv on closed connection")
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise RecvTimeout(f"no frame within {timeout}s") from None
        if data is _CLOSED:
            self._closed = True
            raise ConnectionLost("peer closed the connection")
        return wire.decode_frame(data)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def inproc_pair() -> tuple[QueueConnection, QueueConnection]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return QueueConnection(b_to_a, a_to_b), QueueConnection(a_to_b, b_to_a)


class SocketConnection:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, frame: Frame) -> None:
        try:
            self._sock.sendall(wire.encode_frame(frame))
        except OSError as e:
            raise ConnectionLost(f"send failed: {e}") from None

    def _read_exactly(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise RecvTimeout("socket recv timed out") from None
            except OSError as e:
                raise ConnectionLost(f"recv failed: {e}") from None
            if not chunk:
                raise ConnectionLost("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> Frame:
        self._sock.settimeout(timeout)
        header = self._read_exactly(wire.HEADER_LEN)
        mt, round_, client_id, task_id, payload_len = wire.decode_header(header)
        payload = self._read_exactly(payload_len) if payload_len else b""
        return Frame(mt, round_, client_id, task_id, payload)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen()
        self.host, self.port = self._sock.getsockname()

    def accept(self, timeout: float | None = DEFAULT_TIMEOUT) -> SocketConnection:
        self._sock.settimeout(timeout)
        try:
            conn, _addr = self._sock.accept()
        except socket.timeout:
            raise RecvTimeout("no client connected in time") from None
        return SocketConnection(conn)

    def close(self) -> None:
        self._sock.close()


def tcp_connect(host: str, port: int,
                timeout: float | None = DEFAULT_TIMEOUT) -> SocketConnection:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise ConnectionLost(f"connect to {host}:{port} failed: {e}") from None
    return SocketConnection(sock)


class MeteredConnection:
    """Wraps a connection, counting traffic into a CostLedger.

    ``outbound``/``inbound`` name the directions from the owner's point of
    view (the server meters s->c on send and c->s on recv; a client the
    reverse).
    """

    def __init__(self, conn, ledger, outbound: str, inbound: str):
        self._conn = conn
        self.ledger = ledger
        self._out = outbound
        self._in = inbound

    def send(self, frame: Frame) -> None:
        self._conn.send(frame)
        self.ledger.record(self._out, frame)

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> Frame:
        frame = self._conn.recv(timeout)
        self.ledger.record(self._in, frame)
        return frame

    def close(self) -> None:
        self._conn.close()
