"""Sensor node: capture, filter, flow-hash balancing, batching, transmission.

A sensor consumes packets from a capture source (pcap replay or a simulated
segment port), filters them, and shards flows across W upstream sessions to
the head-server by FNV-1a over the canonical flow key. Batches flush at a
size or age threshold, unacknowledged batches are bounded and retransmitted
after reconnects, and a redirect campaign is maintained for the capture
duration when the source supports frame injection.
"""

from __future__ import annotations

import hashlib
import ipaddress
import logging
from dataclasses import dataclass, field

from . import sim as simmod
from .packet import FlowKey, Packet, Truncated, flow_key, parse_frame, read_pcap
from .redirect import plan_redirect, poison_frames, restore_frames
from .transport import ConnectionLost
from . import wire
from .wire import FrameDecoder, Hello, MessageType

logger = logging.getLogger(__name__)

FNV1A64_OFFSET = 0xCBF29CE484222325
FNV1A64_PRIME = 0x100000001B3

MAX_IN_FLIGHT_BATCHES = 8
FLUSH_BYTES = 64 * 1024
FLUSH_INTERVAL_S = 0.2
BACKOFF_START_S = 1.0
BACKOFF_CAP_S = 30.0
KEYLESS_CHANNEL = 0


class SensorError(Exception):
    pass


class BadFilterRule(SensorError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV1A64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV1A64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def assign_channel(key: FlowKey, w: int) -> int:
    """Stable shard in [0, w): FNV-1a 64 over the key's 13-octet encoding."""
    if w < 1:
        raise SensorError("channel count must be >= 1")
    return fnv1a64(key.encode()) % w


@dataclass(frozen=True)
class FilterRule:
    """One disjunct: accept-all | ip_src/ip_dst in CIDR | proto = n | port = n | arp."""

    kind: str
    network: ipaddress.IPv4Network | None = None
    value: int | None = None

    def matches(self, p: Packet) -> bool:
        if self.kind == "accept-all":
            return True
        if self.kind == "arp":
            return p.is_arp
        if not p.is_ipv4:
            return False
        ip4 = p.layers
        if self.kind == "proto":
            return ip4.proto == self.value
        if self.kind == "port":
            t = ip4.transport
            return t is not None and self.value in (t.src_port, t.dst_port)
        if self.kind == "ip_src":
            return ipaddress.IPv4Address(ip4.src_ip) in self.network
        if self.kind == "ip_dst":
            return ipaddress.IPv4Address(ip4.dst_ip) in self.network
        return False

    def to_text(self) -> str:
        if self.kind in ("accept-all", "arp"):
            return self.kind
        if self.kind in ("ip_src", "ip_dst"):
            return f"{self.kind} in {self.network}"
        return f"{self.kind} = {self.value}"


def parse_rule(text: str) -> FilterRule:
    text = text.strip()
    if text == "accept-all":
        return FilterRule("accept-all")
    if text == "arp":
        return FilterRule("arp")
    if text.startswith(("ip_src in ", "ip_dst in ")):
        kind, _, cidr = text.partition(" in ")
        try:
            return FilterRule(kind, network=ipaddress.IPv4Network(cidr.strip()))
        except ValueError as exc:
            raise BadFilterRule(f"bad CIDR in {text!r}") from exc
    if "=" in text:
        kind, _, value = text.partition("=")
        kind = kind.strip()
        if kind in ("proto", "port"):
            try:
                return FilterRule(kind, value=int(value.strip()))
            except ValueError as exc:
                raise BadFilterRule(f"bad number in {text!r}") from exc
    raise BadFilterRule(f"unrecognized rule {text!r}")


def match_filter(p: Packet, rules) -> bool:
    """Disjunction of rules; an empty rule list accepts everything."""
    if not rules:
        return True
    return any(rule.matches(p) for rule in rules)


@dataclass(frozen=True)
class RedirectSettings:
    targets: tuple[str, ...]
    repoison_interval_s: float = 20.0
    start_delay_s: float = 0.0  # leave room to observe genuine mappings first


@dataclass(frozen=True)
class SensorConfig:
    node_id: str
    token: str
    channels: int = 1
    filter_rules: tuple[FilterRule, ...] = ()
    redirect: RedirectSettings | None = None
    heartbeat_s: float = 10.0
    flush_bytes: int = FLUSH_BYTES
    flush_interval_s: float = FLUSH_INTERVAL_S

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise SensorError("channels must be >= 1")
        if self.heartbeat_s <= 0:
            raise SensorError("heartbeat interval must be positive")


def derive_channel_node_id(node_id: str, channel: int) -> bytes:
    return hashlib.sha256(f"{node_id}/{channel}".encode()).digest()[:16]


class PcapSource:
    """Replay a capture file; packets that fail to parse are counted, not fatal."""

    def __init__(self, pcap_bytes: bytes):
        self._data = pcap_bytes
        self.parse_failures = 0

    def __iter__(self):
        for ts_sec, ts_usec, raw in read_pcap(self._data):
            try:
                yield parse_frame(raw, ts_sec, ts_usec)
            except Truncated:
                self.parse_failures += 1


class SimCaptureSource:
    """Attach to a simulated segment port and co-drive the run in windows.

    Yields the frames the sensor host observes, stamped with tick-derived
    timestamps. inject() schedules frames for upcoming ticks, which is how a
    running sensor's redirect campaign reaches the segment.
    """

    def __init__(
        self,
        segment: simmod.Segment,
        host_id: str,
        script: list[simmod.ScriptEntry],
        until: int,
        window_ticks: int = 50,
    ):
        if host_id not in segment.observed:
            raise SensorError(f"host {host_id} is not a sensor in this segment")
        self.segment = segment
        self.host_id = host_id
        self.until = until
        self.window_ticks = window_ticks
        self._by_window: dict[int, list[simmod.ScriptEntry]] = {}
        for entry in script:
            self._by_window.setdefault(entry.t, []).append(entry)
        self._extra: list[simmod.ScriptEntry] = []

    @property
    def truth(self):
        return self.segment.truth

    @property
    def sensor_mac(self):
        return self.segment.hosts[self.host_id].mac

    @property
    def sensor_ip(self) -> str:
        return self.segment.hosts[self.host_id].ip

    def now_s(self) -> float:
        return self.segment.clock / simmod.TICKS_PER_SECOND

    def inject(self, frames: list[Packet], delay_s: float = 0.0) -> None:
        t = self.segment.clock + int(delay_s * simmod.TICKS_PER_SECOND)
        for frame in frames:
            self._extra.append(
                simmod.ScriptEntry(t=t, src_host=self.host_id, frame=frame)
            )

    def drain_injected(self) -> None:
        """Run any leftover injected frames (e.g. restores at shutdown)."""
        while self._extra:
            horizon = max(e.t for e in self._extra) + 1
            self._run_window(horizon)

    def _run_window(self, t_next: int) -> None:
        window: list[simmod.ScriptEntry] = []
        for t in range(self.segment.clock, t_next):
            window.extend(self._by_window.pop(t, []))
        still_future = [e for e in self._extra if e.t >= t_next]
        due = [e for e in self._extra if e.t < t_next]
        self._extra = still_future
        self.segment.run(window + due, t_next)

    def __iter__(self):
        cursor = 0
        observed = self.segment.observed[self.host_id]
        while self.segment.clock < self.until:
            t_next = min(self.segment.clock + self.window_ticks, self.until)
            self._run_window(t_next)
            while cursor < len(observed):
                tick, pkt = observed[cursor]
                cursor += 1
                yield Packet(
                    ts_sec=tick // simmod.TICKS_PER_SECOND,
                    ts_usec=(tick % simmod.TICKS_PER_SECOND) * 1000,
                    eth=pkt.eth,
                    layers=pkt.layers,
                    raw=pkt.raw,
                )


class Channel:
    """One upstream session: handshake, bounded in-flight batches, heartbeat.

    `unacked` is the send queue: payloads stay queued until their ACK
    arrives, and a reconnect rewinds the per-connection send cursor so
    everything unacknowledged goes out again (at-least-once).
    """

    def __init__(self, config: SensorConfig, index: int, connect, clock):
        self.config = config
        self.index = index
        self.connect = connect
        self.clock = clock
        self.conn = None
        self.decoder = FrameDecoder()
        self.buffer: list[Packet] = []
        self.buffer_bytes = 0
        self.buffer_started_at: float | None = None
        self.unacked: list[bytes] = []
        self._sent_on_conn = 0  # prefix of unacked already sent on this connection
        self.last_heartbeat = clock.now()
        self.sent_batches = 0
        self.acked_batches = 0
        self.reconnects = 0

    def _hello(self) -> Hello:
        return Hello(
            token=self.config.token,
            node_kind=wire.NODE_KIND_SENSOR,
            node_id=derive_channel_node_id(self.config.node_id, self.index),
            name=self.config.node_id,
        )

    def ensure_connected(self) -> None:
        if self.conn is not None:
            return
        backoff = BACKOFF_START_S
        while True:
            try:
                conn = self.connect()
                conn.send(wire.encode_frame(MessageType.HELLO, wire.encode_hello(self._hello())))
                self.decoder = FrameDecoder()
                reply = self._await_frame(conn)
                if reply.msg_type == MessageType.HELLO_ACK:
                    self.conn = conn
                    self._sent_on_conn = 0
                    return
                if reply.msg_type == MessageType.ERROR:
                    code, message = wire.decode_error(reply.payload)
                    raise SensorError(f"handshake rejected: 0x{code:02x} {message}")
                raise SensorError(f"unexpected handshake reply {reply.msg_type}")
            except (ConnectionLost, OSError) as exc:
                logger.warning("channel %d connect failed: %s", self.index, exc)
                self.clock.sleep(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)

    def _await_frame(self, conn, attempts: int = 200):
        for _ in range(attempts):
            data = conn.recv(timeout=0.05)
            if data:
                frames = self.decoder.feed(data)
                if frames:
                    if len(frames) > 1:
                        logger.warning("discarding %d piggybacked frames", len(frames) - 1)
                    return frames[0]
            else:
                self.clock.sleep(0.01)
        raise ConnectionLost("no handshake reply")

    def _handle_inbound(self) -> None:
        if self.conn is None:
            return
        try:
            data = self.conn.recv()
        except ConnectionLost:
            self._drop_connection()
            return
        if not data:
            return
        for frame in self.decoder.feed(data):
            if frame.msg_type == MessageType.ACK:
                if self.unacked:
                    self.unacked.pop(0)
                    self._sent_on_conn = max(0, self._sent_on_conn - 1)
                self.acked_batches += 1
            elif frame.msg_type == MessageType.ERROR:
                code, message = wire.decode_error(frame.payload)
                raise SensorError(f"head error 0x{code:02x}: {message}")

    def _drop_connection(self) -> None:
        if self.conn is not None:
            try:
                self.conn.close()
            except ConnectionLost:
                pass
            self.conn = None
            self.reconnects += 1
        self._sent_on_conn = 0

    def _transmit_pending(self) -> None:
        while self._sent_on_conn < len(self.unacked):
            self.ensure_connected()
            payload = self.unacked[self._sent_on_conn]
            try:
                self.conn.send(wire.encode_frame(MessageType.TRAFFIC_BATCH, payload))
            except ConnectionLost:
                self._drop_connection()
                continue
            self._sent_on_conn += 1
            self.sent_batches += 1
            self._handle_inbound()

    def add(self, pkt: Packet, capture_now: float) -> None:
        if self.buffer_started_at is None:
            self.buffer_started_at = capture_now
        self.buffer.append(pkt)
        self.buffer_bytes += len(pkt.raw) + wire.BATCH_RECORD_HEADER_LEN
        if self.buffer_bytes >= self.config.flush_bytes:
            self.flush()

    def flush_if_due(self, capture_now: float) -> None:
        if (
            self.buffer_started_at is not None
            and capture_now - self.buffer_started_at >= self.config.flush_interval_s
        ):
            self.flush()

    def flush(self) -> None:
        if not self.buffer:
            return
        payloads = wire.batch_records(self.buffer, self.config.flush_bytes + 4096)
        self.buffer = []
        self.buffer_bytes = 0
        self.buffer_started_at = None
        for payload in payloads:
            stalls = 0
            while len(self.unacked) >= MAX_IN_FLIGHT_BATCHES:
                before = self.acked_batches
                self._handle_inbound()
                if self.acked_batches == before:
                    self.clock.sleep(0.01)
                    stalls += 1
                    if stalls > 200:  # ~2 s of silence: reconnect and retransmit
                        self._drop_connection()
                        stalls = 0
                    self._transmit_pending()
            self.unacked.append(payload)
            self._transmit_pending()

    def heartbeat_if_due(self) -> None:
        now = self.clock.now()
        if now - self.last_heartbeat >= self.config.heartbeat_s:
            self.ensure_connected()
            try:
                self.conn.send(wire.encode_frame(MessageType.HEARTBEAT))
            except ConnectionLost:
                self._drop_connection()
            self.last_heartbeat = now

    def bye(self) -> None:
        self.flush()
        deadline = 500
        while self.unacked and deadline:
            self._handle_inbound()
            self._transmit_pending()
            deadline -= 1
            if self.unacked:
                self.clock.sleep(0.01)
        if self.conn is not None:
            try:
                self.conn.send(wire.encode_frame(MessageType.BYE))
                self.conn.close()
            except ConnectionLost:
                pass
        self.conn = None


class RedirectCampaign:
    """Poison on schedule for the capture's duration; restore at shutdown."""

    def __init__(self, settings: RedirectSettings, source):
        self.settings = settings
        self.source = source
        self.plan = plan_redirect(
            set(settings.targets),
            source.truth,
            source.sensor_mac,
            source.sensor_ip,
            repoison_interval_s=settings.repoison_interval_s,
        )
        self._next_poison_at: float | None = None

    def maybe_poison(self, capture_now: float) -> None:
        if capture_now < self.settings.start_delay_s:
            return
        if self._next_poison_at is not None and capture_now < self._next_poison_at:
            return
        self.source.inject(poison_frames(self.plan))
        self._next_poison_at = capture_now + self.settings.repoison_interval_s

    def restore(self) -> None:
        for delay_s, frame in restore_frames(self.plan, self.source.truth):
            self.source.inject([frame], delay_s=delay_s)
        if hasattr(self.source, "drain_injected"):
            self.source.drain_injected()


@dataclass
class SensorReport:
    captured: int = 0
    matched: int = 0
    sent_batches: int = 0
    acked_batches: int = 0
    reconnects: int = 0
    per_channel: dict = field(default_factory=dict)


def run_sensor(config: SensorConfig, source, connect, clock) -> SensorReport:
    """Consume the capture source until exhaustion, then tear down cleanly.

    Every packet passing the filter is transmitted exactly once on the
    channel its flow key hashes to (keyless packets ride channel 0). The
    redirect campaign runs only when the source supports injection.
    """
    channels = [Channel(config, i, connect, clock) for i in range(config.channels)]
    for channel in channels:
        channel.ensure_connected()
    campaign = None
    if config.redirect is not None and hasattr(source, "inject"):
        campaign = RedirectCampaign(config.redirect, source)
        campaign.maybe_poison(0.0)
    report = SensorReport()
    for pkt in source:
        capture_now = pkt.ts_sec + pkt.ts_usec / 1e6
        report.captured += 1
        if campaign is not None:
            campaign.maybe_poison(capture_now)
        if match_filter(pkt, config.filter_rules):
            report.matched += 1
            key = flow_key(pkt)
            index = (
                assign_channel(key, config.channels)
                if key is not None
                else KEYLESS_CHANNEL
            )
            channels[index].add(pkt, capture_now)
        for channel in channels:
            channel.flush_if_due(capture_now)
            channel.heartbeat_if_due()
    if campaign is not None:
        campaign.restore()
    for channel in channels:
        channel.bye()
        report.sent_batches += channel.sent_batches
        report.acked_batches += channel.acked_batches
        report.reconnects += channel.reconnects
        report.per_channel[channel.index] = channel.sent_batches
    return report
