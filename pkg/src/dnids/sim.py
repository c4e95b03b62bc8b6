"""Deterministic discrete-time simulation of one broadcast segment.

Hosts with TTL'd ARP caches hang off a MAC-learning switch; an optional
mirror port with per-tick capacity reproduces span-port loss, and a tap
flag models an inline splitter on a single port. One tick is one
millisecond. Within a tick, frames are processed in FIFO order: scheduled
emissions first, then script entries, then anything re-emitted along the
way. The run loop never consults the wall clock, so identical
(config, seed, script) inputs give byte-identical delivery logs.
"""

from __future__ import annotations

import hashlib
import logging
import random
from collections import deque
from dataclasses import dataclass, field

from .packet import (
    BROADCAST_MAC,
    MacAddr,
    Packet,
    build_arp,
    build_ipv4,
    ip_to_bytes,
)
from .redirect import TruthMap, UnknownDestination, forward_rewrite

logger = logging.getLogger(__name__)

TICKS_PER_SECOND = 1000
DEFAULT_ARP_TTL_TICKS = 60_000
DEFAULT_FDB_TTL_TICKS = 300_000

ZERO_MAC = MacAddr(b"\x00" * 6)

ROLE_ENDPOINT = "endpoint"
ROLE_SENSOR = "sensor"

# event kinds
INJECTED = "INJECTED"
ARP_RESOLVED = "ARP_RESOLVED"
DELIVERED = "DELIVERED"
MIRRORED = "MIRRORED"
MIRROR_DROPPED = "MIRROR_DROPPED"
FLOODED = "FLOODED"
CONSUMED = "CONSUMED"

FATE_DELIVERED = "delivered"
FATE_CONSUMED = "consumed"
FATE_DROPPED = "dropped"


class SimError(Exception):
    pass


class DuplicateAddress(SimError):
    pass


class PortConflict(SimError):
    pass


@dataclass(frozen=True)
class HostSpec:
    host_id: str
    ip: str
    mac: MacAddr
    port: int
    role: str = ROLE_ENDPOINT


@dataclass(frozen=True)
class MirrorSpec:
    port: int
    capacity_frames_per_tick: int

    def __post_init__(self) -> None:
        if self.capacity_frames_per_tick < 1:
            raise SimError("mirror capacity must be positive")


@dataclass(frozen=True)
class TapSpec:
    """Inline splitter: the sensor sees exactly one port's frames."""

    observed_port: int
    sensor_host_id: str


@dataclass(frozen=True)
class FrameTemplate:
    dst_ip: str
    proto: int
    src_port: int = 0
    dst_port: int = 0
    payload_len: int = 0
    tcp_flags: int = 0


@dataclass(frozen=True)
class ScriptEntry:
    t: int
    src_host: str
    template: FrameTemplate | None = None
    frame: Packet | None = None


@dataclass(frozen=True)
class LogEvent:
    tick: int
    event: str
    uid: int
    digest: str
    detail: str


@dataclass(frozen=True)
class FrameInfo:
    uid: int
    digest: str
    src_host: str
    is_ipv4: bool
    is_arp: bool
    src_ip: str | None
    dst_ip: str | None


@dataclass
class DeliveryLog:
    events: list[LogEvent] = field(default_factory=list)
    frames: dict[int, FrameInfo] = field(default_factory=dict)
    fates: dict[int, str] = field(default_factory=dict)

    def add(self, tick: int, event: str, uid: int, digest: str, detail: str = "") -> None:
        self.events.append(LogEvent(tick, event, uid, digest, detail))

    def to_lines(self) -> list[str]:
        return [
            f"{e.tick}\t{e.event}\t{e.uid}\t{e.digest}\t{e.detail}"
            for e in self.events
        ]

    def serialize(self) -> bytes:
        return ("\n".join(self.to_lines()) + "\n").encode()


@dataclass
class SimHost:
    host_id: str
    ip: str
    mac: MacAddr
    role: str = ROLE_ENDPOINT
    # ip -> (mac, expires_at tick); entries past expires_at are never used
    arp_cache: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)  # ip -> [FrameTemplate, ...]
    outstanding: set = field(default_factory=set)

    def cache_lookup(self, ip: str, now: int) -> MacAddr | None:
        entry = self.arp_cache.get(ip)
        if entry is None:
            return None
        mac, expires_at = entry
        if now >= expires_at:
            return None
        return mac

    def cache_update(self, ip: str, mac: MacAddr, expires_at: int) -> None:
        if ip == self.ip:
            return  # own address never enters the cache
        self.arp_cache[ip] = (mac, expires_at)

    def live_cache(self, now: int) -> dict:
        return {
            ip: mac
            for ip, (mac, expires_at) in self.arp_cache.items()
            if now < expires_at
        }


@dataclass
class SimSwitch:
    ports: dict  # port -> host_id
    fdb: dict = field(default_factory=dict)  # MacAddr -> (port, expires_at)
    mirror: MirrorSpec | None = None
    tap: TapSpec | None = None

    def lookup(self, mac: MacAddr, now: int) -> int | None:
        entry = self.fdb.get(mac)
        if entry is None:
            return None
        port, expires_at = entry
        if now >= expires_at:
            return None
        return port

    def learn(self, mac: MacAddr, port: int, expires_at: int) -> None:
        if mac.is_broadcast:
            return
        self.fdb[mac] = (port, expires_at)


class Segment:
    """One broadcast segment: hosts, switch, clock, and the delivery log."""

    def __init__(
        self,
        hosts: list[SimHost],
        switch: SimSwitch,
        seed: int,
        arp_ttl_ticks: int,
        fdb_ttl_ticks: int,
    ):
        self.hosts = {h.host_id: h for h in hosts}
        self.switch = switch
        self.seed = seed
        self.arp_ttl_ticks = arp_ttl_ticks
        self.fdb_ttl_ticks = fdb_ttl_ticks
        self.truth: TruthMap = {h.ip: h.mac for h in hosts}
        self.port_of = {h_id: port for port, h_id in switch.ports.items()}
        self.log = DeliveryLog()
        self.observed: dict[str, list[tuple[int, Packet]]] = {
            h.host_id: [] for h in hosts if h.role == ROLE_SENSOR
        }
        self.clock = 0
        self._rng = random.Random(seed)
        self._uid = 0
        self._wire: deque = deque()
        self._scheduled: dict[int, list[tuple[str, Packet]]] = {}
        self._mirror_used = 0

    # -- bookkeeping --------------------------------------------------------

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"tick={self.clock} seed={self.seed}\n".encode())
        for host_id in sorted(self.hosts):
            host = self.hosts[host_id]
            h.update(f"{host_id} {host.ip} {host.mac} {host.role}\n".encode())
            for ip in sorted(host.arp_cache, key=ip_to_bytes):
                mac, exp = host.arp_cache[ip]
                h.update(f"  {ip} -> {mac} @{exp}\n".encode())
        for mac in sorted(self.switch.fdb, key=lambda m: m.octets):
            port, exp = self.switch.fdb[mac]
            h.update(f"fdb {mac} -> {port} @{exp}\n".encode())
        return h.hexdigest()

    def _observe(self, host_id: str, pkt: Packet) -> None:
        if host_id in self.observed:
            self.observed[host_id].append((self.clock, pkt))

    def _next_uid(self) -> int:
        self._uid += 1
        return self._uid

    # -- transmission and delivery ------------------------------------------

    def _transmit(self, host_id: str, pkt: Packet) -> int:
        host = self.hosts[host_id]
        uid = self._next_uid()
        digest = pkt.digest()
        src_ip = dst_ip = None
        if pkt.is_ipv4:
            src_ip, dst_ip = pkt.layers.src_ip, pkt.layers.dst_ip
        self.log.frames[uid] = FrameInfo(
            uid=uid,
            digest=digest,
            src_host=host_id,
            is_ipv4=pkt.is_ipv4,
            is_arp=pkt.is_arp,
            src_ip=src_ip,
            dst_ip=dst_ip,
        )
        self.log.add(self.clock, INJECTED, uid, digest, f"src={host_id}")
        # a sensor's capture interface sees its own ARP housekeeping, but
        # rewritten forwards are suppressed by the same src-MAC rule that
        # prevents forwarding loops
        if host.role == ROLE_SENSOR and pkt.is_arp:
            self._observe(host_id, pkt)
        self._wire.append((uid, pkt, host_id))
        return uid

    def _mirror_copy(self, uid: int, pkt: Packet, ingress_port: int) -> None:
        mirror = self.switch.mirror
        if mirror is None or ingress_port == mirror.port:
            return
        digest = self.log.frames[uid].digest
        mirror_host = self.switch.ports.get(mirror.port)
        if self._mirror_used < mirror.capacity_frames_per_tick:
            self._mirror_used += 1
            self.log.add(self.clock, MIRRORED, uid, digest, f"host={mirror_host}")
            if mirror_host is not None:
                self._observe(mirror_host, pkt)
        else:
            self.log.add(self.clock, MIRROR_DROPPED, uid, digest, "")

    def _tap_copy(self, uid: int, pkt: Packet, port: int) -> None:
        tap = self.switch.tap
        if tap is None or port != tap.observed_port:
            return
        digest = self.log.frames[uid].digest
        self.log.add(self.clock, MIRRORED, uid, digest, f"host={tap.sensor_host_id} tap=1")
        self._observe(tap.sensor_host_id, pkt)

    def _deliver(self, uid: int, pkt: Packet, port: int) -> None:
        host_id = self.switch.ports[port]
        host = self.hosts[host_id]
        digest = self.log.frames[uid].digest
        self.log.add(self.clock, DELIVERED, uid, digest, f"port={port} host={host_id}")
        self._tap_copy(uid, pkt, port)
        if host.role == ROLE_SENSOR:
            self._observe(host_id, pkt)
        self._receive(uid, pkt, host)

    def _receive(self, uid: int, pkt: Packet, host: SimHost) -> None:
        if pkt.is_arp:
            self._receive_arp(uid, pkt, host)
            return
        if (
            host.role == ROLE_SENSOR
            and pkt.eth.dst == host.mac
            and pkt.is_ipv4
        ):
            try:
                out = forward_rewrite(pkt, self.truth, host.mac)
            except UnknownDestination:
                self.log.add(
                    self.clock, CONSUMED, uid, self.log.frames[uid].digest,
                    f"host={host.host_id} unknown_destination=1",
                )
                self.log.fates[uid] = FATE_DROPPED
                return
            if out is not None:
                self._transmit(host.host_id, out)
            else:
                self.log.add(
                    self.clock, CONSUMED, uid, self.log.frames[uid].digest,
                    f"host={host.host_id}",
                )
                self.log.fates[uid] = FATE_CONSUMED

    def _receive_arp(self, uid: int, pkt: Packet, host: SimHost) -> None:
        arp = pkt.layers
        if arp.op == 1:
            if arp.target_ip == host.ip and arp.sender_ip != host.ip:
                reply = build_arp(
                    op=2,
                    sender_mac=host.mac,
                    sender_ip=host.ip,
                    target_mac=arp.sender_mac,
                    target_ip=arp.sender_ip,
                    eth_dst=arp.sender_mac,
                    eth_src=host.mac,
                )
                self._scheduled.setdefault(self.clock + 1, []).append(
                    (host.host_id, reply)
                )
        elif arp.op == 2:
            if pkt.eth.dst == host.mac or pkt.eth.dst.is_broadcast:
                host.cache_update(
                    arp.sender_ip, arp.sender_mac, self.clock + self.arp_ttl_ticks
                )
                self.log.add(
                    self.clock, ARP_RESOLVED, uid, self.log.frames[uid].digest,
                    f"host={host.host_id} ip={arp.sender_ip} mac={arp.sender_mac}",
                )
                self._release_pending(host, arp.sender_ip)

    def _release_pending(self, host: SimHost, ip: str) -> None:
        host.outstanding.discard(ip)
        templates = host.pending.pop(ip, [])
        for template in templates:
            self._send_template(host, template)

    def _send_template(self, host: SimHost, template: FrameTemplate) -> None:
        mac = host.cache_lookup(template.dst_ip, self.clock)
        if mac is None:
            host.pending.setdefault(template.dst_ip, []).append(template)
            if template.dst_ip not in host.outstanding:
                host.outstanding.add(template.dst_ip)
                request = build_arp(
                    op=1,
                    sender_mac=host.mac,
                    sender_ip=host.ip,
                    target_mac=ZERO_MAC,
                    target_ip=template.dst_ip,
                    eth_dst=BROADCAST_MAC,
                    eth_src=host.mac,
                )
                self._transmit(host.host_id, request)
            return
        pkt = build_ipv4(
            src_mac=host.mac,
            dst_mac=mac,
            src_ip=host.ip,
            dst_ip=template.dst_ip,
            proto=template.proto,
            src_port=template.src_port,
            dst_port=template.dst_port,
            tcp_flags=template.tcp_flags,
            payload=self._rng.randbytes(template.payload_len),
            ts_sec=self.clock // TICKS_PER_SECOND,
            ts_usec=(self.clock % TICKS_PER_SECOND) * 1000,
        )
        self._transmit(host.host_id, pkt)

    def _process_frame(self, uid: int, pkt: Packet, ingress_host_id: str) -> None:
        ingress_port = self.port_of[ingress_host_id]
        expires = self.clock + self.fdb_ttl_ticks
        self.switch.learn(pkt.eth.src, ingress_port, expires)
        self._mirror_copy(uid, pkt, ingress_port)
        self._tap_copy(uid, pkt, ingress_port)
        mirror_port = self.switch.mirror.port if self.switch.mirror else None
        digest = self.log.frames[uid].digest
        if pkt.eth.dst.is_broadcast:
            self.log.add(self.clock, FLOODED, uid, digest, "")
            self.log.fates.setdefault(uid, FATE_DELIVERED)
            for port in sorted(self.switch.ports):
                if port == ingress_port or port == mirror_port:
                    continue
                self._deliver(uid, pkt, port)
            return
        port = self.switch.lookup(pkt.eth.dst, self.clock)
        if port is not None and port != ingress_port:
            self.log.fates.setdefault(uid, FATE_DELIVERED)
            self._deliver(uid, pkt, port)
        elif port == ingress_port:
            # destination hangs off the port the frame came from: drop back
            self.log.fates.setdefault(uid, FATE_DELIVERED)
        else:
            self.log.add(self.clock, FLOODED, uid, digest, "")
            self.log.fates.setdefault(uid, FATE_DELIVERED)
            for p in sorted(self.switch.ports):
                if p == ingress_port or p == mirror_port:
                    continue
                self._deliver(uid, pkt, p)

    # -- the run loop ---------------------------------------------------------

    def run(self, script: list[ScriptEntry], until: int) -> DeliveryLog:
        """Advance the clock to `until`, driving script entries through hosts.

        May be called repeatedly with later horizons; the log accumulates.
        Malformed entries are logged and skipped.
        """
        by_tick: dict[int, list[ScriptEntry]] = {}
        for entry in sorted(script, key=lambda e: e.t):
            if entry.t < self.clock or entry.t >= until:
                logger.warning("script entry at tick %d outside run window", entry.t)
                continue
            if entry.src_host not in self.hosts:
                logger.warning("script entry for unknown host %r", entry.src_host)
                continue
            by_tick.setdefault(entry.t, []).append(entry)
        while self.clock < until:
            self._mirror_used = 0
            for host_id, pkt in self._scheduled.pop(self.clock, []):
                self._transmit(host_id, pkt)
            for entry in by_tick.get(self.clock, []):
                host = self.hosts[entry.src_host]
                if entry.frame is not None:
                    self._transmit(entry.src_host, entry.frame)
                elif entry.template is not None:
                    if entry.template.dst_ip == host.ip:
                        logger.warning("host %s sending to itself, skipped", host.host_id)
                        continue
                    self._send_template(host, entry.template)
                else:
                    logger.warning("empty script entry at tick %d", entry.t)
            while self._wire:
                uid, pkt, ingress = self._wire.popleft()
                self._process_frame(uid, pkt, ingress)
            self.clock += 1
        return self.log


def build_segment(
    hosts: list[HostSpec],
    seed: int = 0,
    arp_ttl_ticks: int = DEFAULT_ARP_TTL_TICKS,
    fdb_ttl_ticks: int = DEFAULT_FDB_TTL_TICKS,
    mirror: MirrorSpec | None = None,
    tap: TapSpec | None = None,
) -> Segment:
    """Validate addressing and wire every host to its switch port."""
    ips = set()
    macs = set()
    ports: dict[int, str] = {}
    for spec in hosts:
        if spec.ip in ips:
            raise DuplicateAddress(f"duplicate ip {spec.ip}")
        if spec.mac in macs:
            raise DuplicateAddress(f"duplicate mac {spec.mac}")
        if spec.port in ports:
            raise PortConflict(f"port {spec.port} assigned twice")
        ips.add(spec.ip)
        macs.add(spec.mac)
        ports[spec.port] = spec.host_id
    sim_hosts = [
        SimHost(host_id=s.host_id, ip=s.ip, mac=s.mac, role=s.role) for s in hosts
    ]
    switch = SimSwitch(ports=ports, mirror=mirror, tap=tap)
    return Segment(sim_hosts, switch, seed, arp_ttl_ticks, fdb_ttl_ticks)


def apply_arp(segment: Segment, frames: list[Packet], t: int) -> None:
    """Apply ARP replies straight into the addressed victims' caches."""
    for pkt in frames:
        if not pkt.is_arp:
            continue
        arp = pkt.layers
        for host in segment.hosts.values():
            if pkt.eth.dst == host.mac or (
                pkt.eth.dst.is_broadcast and arp.target_ip == host.ip
            ):
                host.cache_update(
                    arp.sender_ip, arp.sender_mac, t + segment.arp_ttl_ticks
                )


def coverage(
    log: DeliveryLog,
    sensor_id: str,
    pairs: set[tuple[str, str]],
    from_tick: int = 0,
    to_tick: int | None = None,
) -> float:
    """Fraction of inter-pair IPv4 frames that appeared at the sensor.

    Counts frames injected by non-sensor hosts whose (src_ip, dst_ip) is in
    `pairs`; a frame is seen when it was delivered to the sensor's port or
    mirrored/tapped to it. Copies the switch makes are taken at forwarding
    time, so anything counted was seen before final delivery.
    """
    interpair: set[int] = set()
    for event in log.events:
        if event.event != INJECTED:
            continue
        if event.tick < from_tick or (to_tick is not None and event.tick >= to_tick):
            continue
        info = log.frames[event.uid]
        if not info.is_ipv4 or info.src_host == sensor_id:
            continue
        if (info.src_ip, info.dst_ip) in pairs:
            interpair.add(event.uid)
    if not interpair:
        return 0.0
    seen: set[int] = set()
    for event in log.events:
        if event.event not in (DELIVERED, MIRRORED):
            continue
        fields = dict(
            kv.split("=", 1) for kv in event.detail.split() if "=" in kv
        )
        if fields.get("host") == sensor_id:
            seen.add(event.uid)
    return len(interpair & seen) / len(interpair)


def conservation_counts(log: DeliveryLog) -> dict:
    """Injected frames versus terminal fates; mirror copies counted apart."""
    injected = sum(1 for e in log.events if e.event == INJECTED)
    fates = {"delivered": 0, "consumed": 0, "dropped": 0}
    for fate in log.fates.values():
        fates[fate] += 1
    mirror_copies = sum(1 for e in log.events if e.event == MIRRORED)
    mirror_drops = sum(1 for e in log.events if e.event == MIRROR_DROPPED)
    return {
        "injected": injected,
        "mirror_copies": mirror_copies,
        "mirror_drops": mirror_drops,
        **fates,
    }
