"""Pluggable analyzer host and the two reference analyzers.

Analyzers implement a small contract (on_packet, on_tick, drain) and are
deterministic given the record and tick sequence: time comes from packet
timestamps and the injected clock, never the wall clock, and message ids
come from a seeded generator. A failing analyzer is disabled and logged;
the others keep producing.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

from . import wire
from .idmef import IdmefAlert, MessageIdGenerator, build_alert, to_xml
from .packet import PROTO_TCP, Packet, TCP_FLAG_ACK, TCP_FLAG_SYN, Truncated, ip_to_bytes, parse_frame
from .sensor import derive_channel_node_id
from .transport import ConnectionLost
from .wire import FrameDecoder, Hello, MessageType

logger = logging.getLogger(__name__)


class SolverError(Exception):
    pass


class Analyzer:
    """Base contract: feed packets and ticks, drain alerts exactly once."""

    name = "analyzer"

    def __init__(self) -> None:
        self._analyzer_id = self.name
        self._generator = MessageIdGenerator(0)
        self._pending: list[IdmefAlert] = []

    def configure(self, analyzer_id: str, generator: MessageIdGenerator) -> None:
        self._analyzer_id = analyzer_id
        self._generator = generator

    def on_packet(self, ts: float, packet: Packet) -> None:
        raise NotImplementedError

    def on_tick(self, now: float) -> None:
        pass

    def drain(self) -> list[IdmefAlert]:
        alerts, self._pending = self._pending, []
        return alerts


class PortScanAnalyzer(Analyzer):
    """Sliding-window scan detector over distinct TCP SYN targets per source."""

    name = "portscan"

    def __init__(
        self,
        threshold: int = 15,
        window_s: float = 5.0,
        cooldown_s: float = 60.0,
        sample_targets: int = 10,
    ):
        super().__init__()
        self.threshold = threshold
        self.window_s = window_s
        self.cooldown_s = cooldown_s
        self.sample_targets = sample_targets
        # per source: (dst_ip, dst_port) -> last timestamp it was touched
        self._windows: dict[str, dict[tuple[str, int], float]] = {}
        self._cooldown_until: dict[str, float] = {}

    def on_packet(self, ts: float, packet: Packet) -> None:
        if not packet.is_ipv4 or packet.layers.proto != PROTO_TCP:
            return
        transport = packet.layers.transport
        if transport is None or transport.tcp_flags is None:
            return
        flags = transport.tcp_flags
        if not (flags & TCP_FLAG_SYN) or flags & TCP_FLAG_ACK:
            return
        src = packet.layers.src_ip
        window = self._windows.setdefault(src, {})
        window[(packet.layers.dst_ip, transport.dst_port)] = ts
        # prune by packet time, never wall clock
        cutoff = ts - self.window_s
        for target, seen in list(window.items()):
            if seen < cutoff:
                del window[target]
        if len(window) < self.threshold:
            return
        if ts < self._cooldown_until.get(src, float("-inf")):
            return
        self._cooldown_until[src] = ts + self.cooldown_s
        victims = sorted({ip for ip, _port in window}, key=ip_to_bytes)
        self._pending.append(
            build_alert(
                analyzer_id=self._analyzer_id,
                t=ts,
                sources=[src],
                targets=victims[: self.sample_targets],
                classification="Port scan",
                severity="medium",
                additional_data=(("distinct_targets", str(len(window))),),
                generator=self._generator,
            )
        )


class ArpSpoofAnalyzer(Analyzer):
    """First-seen IP-to-MAC table; conflicting ARP replies raise one alert each."""

    name = "arpspoof"

    def __init__(self) -> None:
        super().__init__()
        self._first_seen: dict[str, str] = {}
        self._alerted: set[tuple[str, str]] = set()

    def on_packet(self, ts: float, packet: Packet) -> None:
        if not packet.is_arp:
            return
        arp = packet.layers
        ip, mac = arp.sender_ip, str(arp.sender_mac)
        known = self._first_seen.get(ip)
        if known is None:
            self._first_seen[ip] = mac
            return
        if known == mac or arp.op != 2:
            return
        if (ip, mac) in self._alerted:
            return
        self._alerted.add((ip, mac))
        # the first-seen mapping only grows: a later flip back to the
        # original owner is not a conflict, only new claimants are
        self._pending.append(
            build_alert(
                analyzer_id=self._analyzer_id,
                t=ts,
                sources=[],
                targets=[ip],
                classification="ARP spoofing",
                severity="high",
                additional_data=(
                    ("first_seen_mac", known),
                    ("claimed_mac", mac),
                ),
                generator=self._generator,
            )
        )


ANALYZERS = {
    PortScanAnalyzer.name: PortScanAnalyzer,
    ArpSpoofAnalyzer.name: ArpSpoofAnalyzer,
}


@dataclass(frozen=True)
class SolverConfig:
    solver_id: str
    token: str
    group: str = "default"
    subscription: tuple[str, ...] = ("accept-all",)
    heartbeat_s: float = 10.0
    seed: int = 0


def _generator_for(seed: int, name: str) -> MessageIdGenerator:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return MessageIdGenerator(int.from_bytes(digest[:8], "big"))


@dataclass
class SolverReport:
    records_seen: int = 0
    alerts_sent: int = 0
    alerts_acked: int = 0
    alerts_rejected: int = 0
    disabled: list = field(default_factory=list)


class SolverClient:
    """One solver session: registration, record intake, alert emission."""

    def __init__(self, config: SolverConfig, analyzers: list[Analyzer], connect, clock):
        self.config = config
        self.analyzers = list(analyzers)
        self.connect = connect
        self.clock = clock
        self.conn = None
        self.decoder = FrameDecoder()
        self.report = SolverReport()
        self._disabled: set[int] = set()
        self.last_heartbeat = clock.now()
        for analyzer in self.analyzers:
            analyzer.configure(
                f"{config.solver_id}/{analyzer.name}",
                _generator_for(config.seed, analyzer.name),
            )

    def connect_and_register(self) -> None:
        hello = Hello(
            token=self.config.token,
            node_kind=wire.NODE_KIND_SOLVER,
            node_id=derive_channel_node_id(self.config.solver_id, 0),
            name=self.config.solver_id,
            group=self.config.group,
            subscription=self.config.subscription,
        )
        conn = self.connect()
        conn.send(wire.encode_frame(MessageType.HELLO, wire.encode_hello(hello)))
        for _ in range(200):
            data = conn.recv(timeout=0.05)
            if not data:
                self.clock.sleep(0.01)
                continue
            frames = self.decoder.feed(data)
            if not frames:
                continue
            reply = frames[0]
            if reply.msg_type == MessageType.HELLO_ACK:
                self.conn = conn
                self._process(frames[1:])
                return
            if reply.msg_type == MessageType.ERROR:
                code, message = wire.decode_error(reply.payload)
                raise SolverError(f"registration rejected: 0x{code:02x} {message}")
        raise SolverError("no registration reply")

    def process_available(self) -> int:
        """Drain inbound frames; returns how many records were processed."""
        if self.conn is None:
            raise SolverError("not connected")
        data = self.conn.recv()
        if not data:
            return 0
        return self._process(self.decoder.feed(data))

    def _process(self, frames) -> int:
        handled = 0
        for frame in frames:
            if frame.msg_type == MessageType.TRAFFIC_BATCH:
                for rec in wire.parse_batch(frame.payload):
                    handled += 1
                    self._feed_record(rec)
            elif frame.msg_type == MessageType.ACK:
                self.report.alerts_acked += wire.decode_ack(frame.payload)
            elif frame.msg_type == MessageType.ERROR:
                code, message = wire.decode_error(frame.payload)
                if code == wire.ERR_INVALID_IDMEF:
                    self.report.alerts_rejected += 1
                    logger.warning("alert rejected: %s", message)
                else:
                    raise SolverError(f"head error 0x{code:02x}: {message}")
        return handled

    def _feed_record(self, rec: wire.BatchRecord) -> None:
        self.report.records_seen += 1
        try:
            packet = parse_frame(rec.raw, rec.ts_sec, rec.ts_usec)
        except Truncated:
            logger.warning("unparseable record skipped")
            return
        ts = rec.ts_sec + rec.ts_usec / 1e6
        for i, analyzer in enumerate(self.analyzers):
            if i in self._disabled:
                continue
            try:
                analyzer.on_packet(ts, packet)
                analyzer.on_tick(ts)
                documents = [to_xml(alert) for alert in analyzer.drain()]
            except Exception as exc:
                self._disabled.add(i)
                self.report.disabled.append(analyzer.name)
                logger.error("analyzer %s disabled: %s", analyzer.name, exc)
                continue
            for document in documents:
                self.conn.send(wire.encode_frame(MessageType.ALERT, document))
                self.report.alerts_sent += 1

    def heartbeat_if_due(self) -> None:
        now = self.clock.now()
        if now - self.last_heartbeat >= self.config.heartbeat_s:
            self.conn.send(wire.encode_frame(MessageType.HEARTBEAT))
            self.last_heartbeat = now

    def bye(self) -> None:
        if self.conn is not None:
            try:
                self.conn.send(wire.encode_frame(MessageType.BYE))
                self.conn.close()
            except ConnectionLost:
                pass
            self.conn = None


def run_solver(
    config: SolverConfig, analyzers: list[Analyzer], connect, clock, stop=None
) -> SolverReport:
    """Daemon loop: register, then pump records and heartbeats until stopped."""
    client = SolverClient(config, analyzers, connect, clock)
    client.connect_and_register()
    try:
        while stop is None or not stop():
            handled = client.process_available()
            client.heartbeat_if_due()
            if not handled:
                clock.sleep(0.02)
    except (ConnectionLost, SolverError) as exc:
        logger.warning("solver session ended: %s", exc)
    finally:
        client.bye()
    return client.report
