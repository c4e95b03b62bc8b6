"""Ethernet / ARP / IPv4 frame parsing, building, and classic pcap file I/O.

Frames parse into a small structured model that re-serializes to the exact
input octets. IPv4 keeps its whole network-layer slice verbatim (checksums
and options untouched); only convenience fields are lifted out. IPv6, VLAN
tags, and IP fragments are treated as opaque payloads.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
ETH_HEADER_LEN = 14
ARP_BODY_LEN = 28

PROTO_TCP = 6
PROTO_UDP = 17

TCP_FLAG_FIN = 0x01
TCP_FLAG_SYN = 0x02
TCP_FLAG_RST = 0x04
TCP_FLAG_ACK = 0x10

PCAP_MAGIC_BE = 0xA1B2C3D4
PCAP_MAGIC_LE = 0xD4C3B2A1
PCAP_GLOBAL_HEADER_LEN = 24
PCAP_RECORD_HEADER_LEN = 16
PCAP_SNAPLEN = 65535


class PacketError(Exception):
    """Base class for frame and capture-file errors."""


class Truncated(PacketError):
    """Fewer octets than the declared headers require."""


class InvalidField(PacketError):
    """A structural field is out of range (e.g. microseconds >= 10^6)."""


class BadMagic(PacketError):
    """Capture stream does not start with a known pcap magic."""


class TruncatedRecord(PacketError):
    """Capture stream tears mid-record."""


class RecordTooLarge(PacketError):
    """Record exceeds the pcap snap length."""


def ip_to_bytes(ip: str) -> bytes:
    try:
        return socket.inet_aton(ip)
    except OSError as exc:
        raise InvalidField(f"bad ipv4 address {ip!r}") from exc


def bytes_to_ip(b: bytes) -> str:
    return socket.inet_ntoa(b)


@dataclass(frozen=True, order=True)
class MacAddr:
    octets: bytes

    def __post_init__(self) -> None:
        if len(self.octets) != 6:
            raise InvalidField(f"MAC must be 6 octets, got {len(self.octets)}")

    @classmethod
    def parse(cls, text: str) -> "MacAddr":
        parts = text.split(":")
        if len(parts) != 6:
            raise InvalidField(f"bad MAC text {text!r}")
        try:
            return cls(bytes(int(p, 16) for p in parts))
        except ValueError as exc:
            raise InvalidField(f"bad MAC text {text!r}") from exc

    @property
    def is_broadcast(self) -> bool:
        return self.octets == b"\xff" * 6

    def __str__(self) -> str:
        return ":".join(f"{b:02x}" for b in self.octets)


BROADCAST_MAC = MacAddr(b"\xff" * 6)


@dataclass(frozen=True)
class EthHeader:
    dst: MacAddr
    src: MacAddr
    ethertype: int

    def to_bytes(self) -> bytes:
        return self.dst.octets + self.src.octets + struct.pack(">H", self.ethertype)


@dataclass(frozen=True)
class Arp:
    op: int  # 1 request, 2 reply
    sender_mac: MacAddr
    sender_ip: str
    target_mac: MacAddr
    target_ip: str
    trailer: bytes = b""  # Ethernet padding after the 28-octet ARP body, verbatim

    def to_bytes(self) -> bytes:
        return (
            struct.pack(">HHBBH", 1, ETHERTYPE_IPV4, 6, 4, self.op)
            + self.sender_mac.octets
            + ip_to_bytes(self.sender_ip)
            + self.target_mac.octets
            + ip_to_bytes(self.target_ip)
            + self.trailer
        )


@dataclass(frozen=True)
class Transport:
    src_port: int
    dst_port: int
    tcp_flags: int | None = None  # present for TCP only


@dataclass(frozen=True)
class Ipv4:
    src_ip: str
    dst_ip: str
    proto: int
    transport: Transport | None
    l3: bytes  # the entire network-layer slice, preserved verbatim

    def to_bytes(self) -> bytes:
        return self.l3


@dataclass(frozen=True)
class Opaque:
    payload: bytes

    def to_bytes(self) -> bytes:
        return self.payload


Layer = Arp | Ipv4 | Opaque


@dataclass(frozen=True)
class Packet:
    ts_sec: int
    ts_usec: int
    eth: EthHeader
    layers: Layer
    raw: bytes

    @property
    def is_ipv4(self) -> bool:
        return isinstance(self.layers, Ipv4)

    @property
    def is_arp(self) -> bool:
        return isinstance(self.layers, Arp)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.raw).hexdigest()[:16]


@dataclass(frozen=True, order=True)
class FlowKey:
    """Direction-canonical 5-tuple: lo/hi ordered on packed (ip, port)."""

    proto: int
    lo: tuple[str, int]
    hi: tuple[str, int]

    def encode(self) -> bytes:
        """13-octet big-endian encoding: proto, lo.ip, lo.port, hi.ip, hi.port."""
        return (
            bytes([self.proto])
            + ip_to_bytes(self.lo[0])
            + struct.pack(">H", self.lo[1])
            + ip_to_bytes(self.hi[0])
            + struct.pack(">H", self.hi[1])
        )


def _parse_ipv4(payload: bytes) -> Layer:
    if len(payload) < 20:
        raise Truncated("IPv4 header needs 20 octets")
    version_ihl = payload[0]
    version = version_ihl >> 4
    ihl = (version_ihl & 0x0F) * 4
    if version != 4 or ihl < 20:
        return Opaque(payload)
    if len(payload) < ihl:
        raise Truncated("IPv4 options exceed available octets")
    flags_frag = struct.unpack(">H", payload[6:8])[0]
    if flags_frag & 0x3FFF:  # MF set or fragment offset nonzero
        return Opaque(payload)
    proto = payload[9]
    src_ip = bytes_to_ip(payload[12:16])
    dst_ip = bytes_to_ip(payload[16:20])
    rest = payload[ihl:]
    transport = None
    if proto == PROTO_TCP and len(rest) >= 14:
        sport, dport = struct.unpack(">HH", rest[0:4])
        transport = Transport(sport, dport, rest[13])
    elif proto == PROTO_UDP and len(rest) >= 4:
        sport, dport = struct.unpack(">HH", rest[0:4])
        transport = Transport(sport, dport, None)
    return Ipv4(src_ip, dst_ip, proto, transport, payload)


def _parse_arp(payload: bytes) -> Layer:
    if len(payload) < ARP_BODY_LEN:
        raise Truncated("ARP body needs 28 octets")
    htype, ptype, hlen, plen, op = struct.unpack(">HHBBH", payload[0:8])
    if htype != 1 or ptype != ETHERTYPE_IPV4 or hlen != 6 or plen != 4:
        return Opaque(payload)
    return Arp(
        op=op,
        sender_mac=MacAddr(payload[8:14]),
        sender_ip=bytes_to_ip(payload[14:18]),
        target_mac=MacAddr(payload[18:24]),
        target_ip=bytes_to_ip(payload[24:28]),
        trailer=payload[ARP_BODY_LEN:],
    )


def parse_frame(data: bytes, ts_sec: int = 0, ts_usec: int = 0) -> Packet:
    """Parse one Ethernet frame. Unknown ethertypes become Opaque."""
    if len(data) < ETH_HEADER_LEN:
        raise Truncated(f"Ethernet header needs 14 octets, got {len(data)}")
    eth = EthHeader(
        dst=MacAddr(data[0:6]),
        src=MacAddr(data[6:12]),
        ethertype=struct.unpack(">H", data[12:14])[0],
    )
    payload = data[ETH_HEADER_LEN:]
    if eth.ethertype == ETHERTYPE_ARP:
        layers = _parse_arp(payload)
    elif eth.ethertype == ETHERTYPE_IPV4:
        layers = _parse_ipv4(payload)
    else:
        layers = Opaque(payload)
    return Packet(ts_sec=ts_sec, ts_usec=ts_usec, eth=eth, layers=layers, raw=data)


def serialize_frame(p: Packet) -> bytes:
    """Re-emit the frame from its parsed fields; byte-identical to the parse input."""
    if not 0 <= p.ts_usec < 1_000_000:
        raise InvalidField(f"microseconds out of range: {p.ts_usec}")
    return p.eth.to_bytes() + p.layers.to_bytes()


def flow_key(p: Packet) -> FlowKey | None:
    """Canonical flow key for IPv4 packets; None for anything else.

    TCP/UDP use their ports, other IP protocols get port 0. Both directions
    of one conversation map to the same key.
    """
    if not isinstance(p.layers, Ipv4):
        return None
    ip4 = p.layers
    if ip4.transport is not None:
        a = (ip4.src_ip, ip4.transport.src_port)
        b = (ip4.dst_ip, ip4.transport.dst_port)
    else:
        a = (ip4.src_ip, 0)
        b = (ip4.dst_ip, 0)
    ka = (ip_to_bytes(a[0]), a[1])
    kb = (ip_to_bytes(b[0]), b[1])
    lo, hi = (a, b) if ka <= kb else (b, a)
    return FlowKey(proto=ip4.proto, lo=lo, hi=hi)


def checksum16(data: bytes) -> int:
    """RFC 1071 ones'-complement sum over 16-bit words."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f">{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_arp(
    op: int,
    sender_mac: MacAddr,
    sender_ip: str,
    target_mac: MacAddr,
    target_ip: str,
    eth_dst: MacAddr | None = None,
    eth_src: MacAddr | None = None,
    ts_sec: int = 0,
    ts_usec: int = 0,
) -> Packet:
    """Build an ARP frame. Requests default to broadcast, replies to unicast."""
    if eth_src is None:
        eth_src = sender_mac
    if eth_dst is None:
        eth_dst = BROADCAST_MAC if op == 1 else target_mac
    eth = EthHeader(dst=eth_dst, src=eth_src, ethertype=ETHERTYPE_ARP)
    body = Arp(op, sender_mac, sender_ip, target_mac, target_ip)
    raw = eth.to_bytes() + body.to_bytes()
    return Packet(ts_sec, ts_usec, eth, body, raw)


def build_ipv4(
    src_mac: MacAddr,
    dst_mac: MacAddr,
    src_ip: str,
    dst_ip: str,
    proto: int,
    src_port: int = 0,
    dst_port: int = 0,
    tcp_flags: int = 0,
    payload: bytes = b"",
    ts_sec: int = 0,
    ts_usec: int = 0,
    ttl: int = 64,
    ident: int = 0,
) -> Packet:
    """Build an Ethernet+IPv4 frame with valid header checksums.

    TCP frames get a minimal 20-octet header carrying `tcp_flags`; UDP gets
    its 8-octet header. Other protocols carry `payload` directly after IP.
    """
    if proto == PROTO_TCP:
        seg = struct.pack(
            ">HHIIBBHHH", src_port, dst_port, 0, 0, 5 << 4, tcp_flags, 8192, 0, 0
        ) + payload
        cksum = checksum16(
            ip_to_bytes(src_ip)
            + ip_to_bytes(dst_ip)
            + struct.pack(">BBH", 0, proto, len(seg))
            + seg
        )
        seg = seg[:16] + struct.pack(">H", cksum) + seg[18:]
    elif proto == PROTO_UDP:
        seg = struct.pack(">HHHH", src_port, dst_port, 8 + len(payload), 0) + payload
        cksum = checksum16(
            ip_to_bytes(src_ip)
            + ip_to_bytes(dst_ip)
            + struct.pack(">BBH", 0, proto, len(seg))
            + seg
        )
        seg = seg[:6] + struct.pack(">H", cksum or 0xFFFF) + seg[8:]
    else:
        seg = payload
    total_len = 20 + len(seg)
    header = struct.pack(
        ">BBHHHBBH4s4s",
        0x45,
        0,
        total_len,
        ident,
        0,
        ttl,
        proto,
        0,
        ip_to_bytes(src_ip),
        ip_to_bytes(dst_ip),
    )
    header = header[:10] + struct.pack(">H", checksum16(header)) + header[12:]
    eth = EthHeader(dst=dst_mac, src=src_mac, ethertype=ETHERTYPE_IPV4)
    raw = eth.to_bytes() + header + seg
    return parse_frame(raw, ts_sec, ts_usec)


def rewrite_macs(p: Packet, new_src: MacAddr, new_dst: MacAddr) -> Packet:
    """Copy of `p` with only the 12 Ethernet address octets replaced."""
    raw = new_dst.octets + new_src.octets + p.raw[12:]
    return parse_frame(raw, p.ts_sec, p.ts_usec)


def read_pcap(buf: bytes):
    """Yield (ts_sec, ts_usec, frame-octets) records from a classic pcap image.

    Accepts both byte orders via the magic. Yields every intact record before
    raising TruncatedRecord on a torn tail.
    """
    if len(buf) < PCAP_GLOBAL_HEADER_LEN:
        raise BadMagic("stream shorter than a pcap global header")
    magic = struct.unpack(">I", buf[0:4])[0]
    if magic == PCAP_MAGIC_BE:
        end = ">"
    elif magic == PCAP_MAGIC_LE:
        end = "<"
    else:
        raise BadMagic(f"unknown magic 0x{magic:08x}")
    offset = PCAP_GLOBAL_HEADER_LEN
    while offset < len(buf):
        if offset + PCAP_RECORD_HEADER_LEN > len(buf):
            raise TruncatedRecord(f"record header torn at offset {offset}")
        ts_sec, ts_usec, incl_len, _orig_len = struct.unpack(
            f"{end}IIII", buf[offset : offset + PCAP_RECORD_HEADER_LEN]
        )
        offset += PCAP_RECORD_HEADER_LEN
        if offset + incl_len > len(buf):
            raise TruncatedRecord(f"record payload torn at offset {offset}")
        yield ts_sec, ts_usec, buf[offset : offset + incl_len]
        offset += incl_len


def write_pcap(records) -> bytes:
    """Serialize (ts_sec, ts_usec, frame-octets) records as big-endian pcap 2.4."""
    out = [
        struct.pack(
            ">IHHiIII", PCAP_MAGIC_BE, 2, 4, 0, 0, PCAP_SNAPLEN, 1
        )
    ]
    for ts_sec, ts_usec, data in records:
        if len(data) > PCAP_SNAPLEN:
            raise RecordTooLarge(f"{len(data)} octets exceeds snaplen {PCAP_SNAPLEN}")
        out.append(struct.pack(">IIII", ts_sec, ts_usec, len(data), len(data)))
        out.append(data)
    return b"".join(out)
