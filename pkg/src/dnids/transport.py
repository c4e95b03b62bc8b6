"""Connection plumbing shared by sensors, the head-server, and solvers.

Two transports satisfy the same tiny duck type (send/recv/close): an
in-process pair for colocated nodes and deterministic tests, and a TCP
stream for separate processes. Clocks are injected everywhere so replay
and simulation never depend on wall time.
"""

from __future__ import annotations

import socket
import time


class ConnectionLost(Exception):
    pass


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class ManualClock:
    """Test clock; sleep() just advances it."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        self._now += seconds

    def advance(self, seconds: float) -> None:
        self._now += seconds


class InProcessConn:
    """Client endpoint wired straight into a server's feed() method.

    send() hands octets to the server synchronously; whatever the server
    writes back accumulates until recv() drains it.
    """

    def __init__(self, server, server_conn):
        self._server = server
        self._server_conn = server_conn
        self._inbox: list[bytes] = []
        self.closed = False

    def deliver(self, data: bytes) -> None:
        self._inbox.append(data)

    def send(self, data: bytes) -> None:
        if self.closed:
            raise ConnectionLost("connection is closed")
        self._server.feed(self._server_conn, data)

    def recv(self, timeout: float = 0.0) -> bytes:
        data = b"".join(self._inbox)
        self._inbox.clear()
        return data

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._server.disconnect(self._server_conn)

    def break_abruptly(self) -> None:
        """Simulate transport loss without a clean goodbye."""
        self.closed = True
        self._server.disconnect(self._server_conn)


class TcpConn:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.closed = False

    def send(self, data: bytes) -> None:
        if self.closed:
            raise ConnectionLost("connection is closed")
        try:
            self._sock.sendall(data)
        except OSError as exc:
            self.closed = True
            raise ConnectionLost(str(exc)) from exc

    def recv(self, timeout: float = 0.0) -> bytes:
        if self.closed:
            raise ConnectionLost("connection is closed")
        self._sock.settimeout(timeout if timeout > 0 else 0.000001)
        try:
            data = self._sock.recv(65536)
        except socket.timeout:
            return b""
        except OSError as exc:
            self.closed = True
            raise ConnectionLost(str(exc)) from exc
        if data == b"":
            self.closed = True
            raise ConnectionLost("peer closed the connection")
        return data

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self._sock.close()
            except OSError:
                pass


def connect_tcp(host: str, port: int, timeout: float = 5.0) -> TcpConn:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpConn(sock)


def parse_address(text: str, default_port: int = 7415) -> tuple[str, int]:
    if ":" in text:
        host, _, port = text.rpartition(":")
        return host or "127.0.0.1", int(port)
    return text, default_port
