"""Head-server: session admission, traffic persistence, dispatch, alerts.

Sensors stream TRAFFIC_BATCH frames that are persisted before they are
acknowledged; solvers register a group and subscription in their HELLO and
receive matching records with flow affinity (one member per group, chosen
by flow hash). Incoming IDMEF alerts are validated before they reach the
alert store. Solver colocation works over the in-process transport; remote
nodes use the TCP listener on port 7415.
"""

from __future__ import annotations

import hashlib
import logging
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import idmef, wire
from .packet import Truncated, flow_key, parse_frame
from .sensor import FilterRule, fnv1a64, match_filter, parse_rule
from .store import AlertRow, AlertStore, IoFailure, TrafficRecord, TrafficStore
from .transport import InProcessConn, SystemClock
from .wire import FrameDecoder, MessageType

logger = logging.getLogger(__name__)

DEFAULT_PORT = 7415


class HeadError(Exception):
    pass


@dataclass(frozen=True)
class SolverRegistration:
    solver_id: str
    group: str
    subscription: tuple[FilterRule, ...]


@dataclass(frozen=True)
class DispatchDecision:
    record_id: int
    chosen: tuple[str, ...]  # solver ids, at most one per group


def dispatch(
    record: TrafficRecord, registrations: list[SolverRegistration]
) -> DispatchDecision:
    """Pick at most one solver per group, deterministically.

    Members of a group split load by flow hash over the sorted member list;
    keyless records go to the group's first member. Distinct groups each
    receive the record.
    """
    try:
        packet = parse_frame(record.raw, record.ts_sec, record.ts_usec)
    except Truncated:
        packet = None
    groups: dict[str, list[SolverRegistration]] = {}
    for reg in sorted(registrations, key=lambda r: r.solver_id):
        groups.setdefault(reg.group, []).append(reg)
    chosen: list[str] = []
    for group_name in sorted(groups):
        members = [
            reg
            for reg in groups[group_name]
            if packet is not None and match_filter(packet, reg.subscription)
        ]
        if not members:
            continue
        if record.flow_key is not None:
            index = fnv1a64(record.flow_key.encode()) % len(members)
        else:
            index = 0
        chosen.append(members[index].solver_id)
    return DispatchDecision(record_id=record.record_id or 0, chosen=tuple(chosen))


@dataclass
class HeadConnection:
    """Per-connection state; `send` pushes bytes toward the peer."""

    send: object
    decoder: FrameDecoder = field(default_factory=FrameDecoder)
    session: wire.Session | None = None
    registration: SolverRegistration | None = None
    closed: bool = False


class HeadServer:
    """Receives, persists, dispatches, and answers queries.

    All session handling runs under one lock: traffic-store appends are
    serialized, and dispatch for a record happens after its persistence.
    """

    def __init__(
        self,
        store_dir: str | Path,
        token: str,
        dedup: bool = False,
        clock=None,
        heartbeat_s: float = wire.HEARTBEAT_INTERVAL_S,
    ):
        store_dir = Path(store_dir)
        self.traffic = TrafficStore(store_dir / "traffic")
        self.alerts = AlertStore(store_dir / "alerts")
        self.token = token
        self.dedup = dedup
        self.clock = clock if clock is not None else SystemClock()
        self.heartbeat_s = heartbeat_s
        self.registry = wire.SessionRegistry()
        self.connections: list[HeadConnection] = []
        self._seen_digests: set[bytes] = set()
        self._lock = threading.RLock()
        self._tcp_server = None

    # -- connection lifecycle ------------------------------------------------

    def local_connect(self) -> InProcessConn:
        """In-process transport endpoint (solver colocation, tests)."""
        with self._lock:
            conn = HeadConnection(send=None)
            client = InProcessConn(self, conn)
            conn.send = client.deliver
            self.connections.append(conn)
            return client

    def attach_transport(self, send) -> HeadConnection:
        """Register an externally pumped connection (the TCP handler)."""
        with self._lock:
            conn = HeadConnection(send=send)
            self.connections.append(conn)
            return conn

    def disconnect(self, conn: HeadConnection) -> None:
        with self._lock:
            self._close(conn, notify=False)

    def _close(self, conn: HeadConnection, notify: bool = True, error: bytes | None = None) -> None:
        if conn.closed:
            return
        conn.closed = True
        if error is not None and notify:
            self._safe_send(conn, error)
        if conn.session is not None and conn.session.open:
            self.registry.close(conn.session)
        if conn in self.connections:
            self.connections.remove(conn)

    def _safe_send(self, conn: HeadConnection, data: bytes) -> None:
        try:
            conn.send(data)
        except Exception:  # transport already gone; nothing to salvage
            logger.debug("send to closed connection dropped")

    # -- frame handling --------------------------------------------------------

    def feed(self, conn: HeadConnection, data: bytes) -> None:
        with self._lock:
            if conn.closed:
                return
            try:
                frames = conn.decoder.feed(data)
            except wire.ProtocolError as exc:
                logger.warning("protocol error, closing session: %s", exc)
                self._close(conn)
                return
            for frame in frames:
                if conn.closed:
                    break
                self._handle(conn, frame)

    def _handle(self, conn: HeadConnection, frame: wire.Frame) -> None:
        if frame.msg_type == MessageType.HELLO:
            self._handle_hello(conn, frame)
            return
        if conn.session is None or not conn.session.open:
            self._close(conn, error=wire.encode_error(wire.ERR_BAD_HELLO, "not authenticated"))
            return
        conn.session.last_heard = self.clock.now()
        if frame.msg_type == MessageType.TRAFFIC_BATCH:
            self._handle_batch(conn, frame)
        elif frame.msg_type == MessageType.ALERT:
            self._handle_alert(conn, frame)
        elif frame.msg_type == MessageType.HEARTBEAT:
            pass  # last_heard already refreshed
        elif frame.msg_type == MessageType.BYE:
            self._close(conn)
        else:
            logger.warning("unexpected %s from client, ignored", frame.msg_type.name)

    def _handle_hello(self, conn: HeadConnection, frame: wire.Frame) -> None:
        try:
            hello = wire.decode_hello(frame.payload)
        except wire.BadHello as exc:
            self._close(conn, error=wire.encode_error(wire.ERR_BAD_HELLO, str(exc)))
            return
        result = self.registry.handshake(hello, self.token, now=self.clock.now())
        if result.session is None:
            self._safe_send(conn, result.reply)
            self._close(conn, notify=False)
            return
        if result.superseded is not None:
            for other in list(self.connections):
                if other.session is result.superseded:
                    self._close(
                        other,
                        error=wire.encode_error(wire.ERR_SUPERSEDED, "newer session wins"),
                    )
        conn.session = result.session
        if hello.node_kind == wire.NODE_KIND_SOLVER:
            try:
                rules = tuple(parse_rule(r) for r in hello.subscription)
            except Exception:
                self._close(conn, error=wire.encode_error(wire.ERR_BAD_HELLO, "bad subscription"))
                return
            solver_id = hello.name or hello.node_id.hex()
            conn.registration = SolverRegistration(
                solver_id=solver_id, group=hello.group or "default", subscription=rules
            )
        self._safe_send(conn, result.reply)

    def _handle_batch(self, conn: HeadConnection, frame: wire.Frame) -> None:
        if conn.session.node_kind != wire.NODE_KIND_SENSOR:
            self._safe_send(
                conn, wire.encode_error(wire.ERR_MALFORMED_BATCH, "not a sensor session")
            )
            return
        try:
            batch = wire.parse_batch(frame.payload)
        except wire.MalformedBatch as exc:
            # atomically discarded: nothing was persisted yet
            self._safe_send(conn, wire.encode_error(wire.ERR_MALFORMED_BATCH, str(exc)))
            return
        sensor_id = conn.session.hello.name or conn.session.node_id.hex()
        recv_time = self.clock.now()
        stored: list[TrafficRecord] = []
        try:
            for rec in batch:
                if self.dedup:
                    digest = hashlib.sha256(
                        sensor_id.encode()
                        + rec.ts_sec.to_bytes(8, "big")
                        + rec.ts_usec.to_bytes(4, "big")
                        + rec.raw
                    ).digest()
                    if digest in self._seen_digests:
                        continue
                    self._seen_digests.add(digest)
                try:
                    key = flow_key(parse_frame(rec.raw, rec.ts_sec, rec.ts_usec))
                except Truncated:
                    key = None
                record = TrafficRecord(
                    record_id=None,
                    sensor_id=sensor_id,
                    recv_time=recv_time,
                    ts_sec=rec.ts_sec,
                    ts_usec=rec.ts_usec,
                    flow_key=key,
                    orig_len=rec.orig_len,
                    raw=rec.raw,
                )
                record_id = self.traffic.append(record)
                stored.append(self.traffic.get(record_id))
            self.traffic.flush()
        except IoFailure as exc:
            logger.error("store failure, batch unacknowledged: %s", exc)
            return
        self._safe_send(conn, wire.encode_ack(len(batch)))
        for record in stored:
            self._dispatch_record(record)

    def _live_registrations(self) -> list[tuple[SolverRegistration, HeadConnection]]:
        return [
            (c.registration, c)
            for c in self.connections
            if c.registration is not None
            and c.session is not None
            and c.session.open
            and not c.closed
        ]

    def _dispatch_record(self, record: TrafficRecord) -> None:
        live = self._live_registrations()
        decision = dispatch(record, [reg for reg, _ in live])
        if not decision.chosen:
            return
        by_id = {reg.solver_id: conn for reg, conn in live}
        payloads = wire.batch_records([record])
        for solver_id in decision.chosen:
            conn = by_id.get(solver_id)
            if conn is None:
                continue
            for payload in payloads:
                self._safe_send(
                    conn, wire.encode_frame(MessageType.TRAFFIC_BATCH, payload)
                )

    def _handle_alert(self, conn: HeadConnection, frame: wire.Frame) -> None:
        if conn.session.node_kind != wire.NODE_KIND_SOLVER:
            self._safe_send(
                conn, wire.encode_error(wire.ERR_INVALID_IDMEF, "not a solver session")
            )
            return
        try:
            alert = idmef.parse_xml(frame.payload)
        except idmef.IdmefError as exc:
            self._safe_send(conn, wire.encode_error(wire.ERR_INVALID_IDMEF, str(exc)))
            return
        if not isinstance(alert, idmef.IdmefAlert):
            self._safe_send(
                conn, wire.encode_error(wire.ERR_INVALID_IDMEF, "not an Alert document")
            )
            return
        violations = idmef.validate(alert)
        if violations:
            self._safe_send(
                conn,
                wire.encode_error(wire.ERR_INVALID_IDMEF, "; ".join(violations)),
            )
            return
        solver_id = conn.session.hello.name or conn.session.node_id.hex()
        row = AlertRow(
            alert_id=None,
            received_time=self.clock.now(),
            solver_id=solver_id,
            messageid=alert.messageid,
            classification_text=alert.classification_text,
            analyzer_id=alert.analyzer_id,
            severity=alert.severity,
            duplicate=False,
            xml=frame.payload,
        )
        try:
            self.alerts.insert(row)
            self.alerts.flush()
        except IoFailure as exc:
            logger.error("alert store failure: %s", exc)
            return
        self._safe_send(conn, wire.encode_ack(1))

    # -- liveness ---------------------------------------------------------------

    def check_liveness(self, now: float | None = None) -> list[wire.Session]:
        """Close sessions that missed three heartbeats; returns the casualties."""
        if now is None:
            now = self.clock.now()
        limit = self.heartbeat_s * wire.MISSED_BEATS_LIMIT
        closed = []
        with self._lock:
            for conn in list(self.connections):
                if conn.session is None:
                    continue
                if now - conn.session.last_heard > limit:
                    closed.append(conn.session)
                    self._close(conn, notify=False)
        return closed

    # -- queries ------------------------------------------------------------------

    def query_traffic(self, ts_start, ts_end, flow_filter=None, limit=1000):
        with self._lock:
            return self.traffic.query(ts_start, ts_end, flow_filter, limit)

    def query_alerts(self, classification_text=None, analyzer_id=None,
                     time_range=None, limit=1000):
        with self._lock:
            return self.alerts.query(classification_text, analyzer_id, time_range, limit)

    def close(self) -> None:
        with self._lock:
            for conn in list(self.connections):
                self._close(conn, notify=False)
            self.traffic.close()
            self.alerts.close()
        if self._tcp_server is not None:
            self._tcp_server.shutdown()
            self._tcp_server = None

    # -- TCP listener ----------------------------------------------------------------

    def serve_tcp(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        """Start the stream listener in a background thread; returns the server."""
        head = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sock = self.request
                lock = threading.Lock()

                def send(data: bytes) -> None:
                    with lock:
                        sock.sendall(data)

                conn = head.attach_transport(send)
                try:
                    while not conn.closed:
                        data = sock.recv(65536)
                        if not data:
                            break
                        head.feed(conn, data)
                except OSError:
                    pass
                finally:
                    head.disconnect(conn)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        server = Server((host, port), Handler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        self._tcp_server = server
        return server
