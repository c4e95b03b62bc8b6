"""Framed messaging between sensors, the head-server, and solvers.

Wire contract, bit-exact: each frame is a 6-octet header (payload length as
big-endian u32, version 0x01, message type) followed by the payload. A
shared token inside HELLO stands in for the protected management channel;
transport encryption is out of scope.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

VERSION = 0x01
HEADER_LEN = 6
MAX_PAYLOAD = 16 * 1024 * 1024

NODE_KIND_SENSOR = 0x01
NODE_KIND_SOLVER = 0x02

# ERROR frame codes
ERR_AUTH_FAILED = 0x01
ERR_BAD_HELLO = 0x02
ERR_SUPERSEDED = 0x03
ERR_MALFORMED_BATCH = 0x04
ERR_INVALID_IDMEF = 0x05

HEARTBEAT_INTERVAL_S = 10.0
MISSED_BEATS_LIMIT = 3

BATCH_RECORD_HEADER_LEN = 20  # ts_sec u64 + ts_usec u32 + orig_len u32 + cap_len u32


class MessageType(IntEnum):
    HELLO = 0x01
    HELLO_ACK = 0x02
    TRAFFIC_BATCH = 0x03
    HEARTBEAT = 0x04
    ALERT = 0x05
    ACK = 0x06
    BYE = 0x07
    ERROR = 0x08


class ProtocolError(Exception):
    """Fatal to the session."""


class FrameTooLarge(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class BadHello(ProtocolError):
    pass


class MalformedBatch(ProtocolError):
    pass


class RecordTooLarge(ProtocolError):
    pass


class _NeedMoreData:
    def __repr__(self) -> str:
        return "NeedMoreData"


NEED_MORE_DATA = _NeedMoreData()


@dataclass(frozen=True)
class Frame:
    msg_type: MessageType
    payload: bytes


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload {len(payload)} exceeds {MAX_PAYLOAD}")
    return struct.pack(">IBB", len(payload), VERSION, int(msg_type)) + payload


def decode_frame(buffer: bytes):
    """Decode one frame from the head of `buffer`.

    Returns (Frame, octets-consumed) or NEED_MORE_DATA. Header problems
    raise as soon as the 6 header octets are available; the declared frame
    is never over-read.
    """
    if len(buffer) < HEADER_LEN:
        return NEED_MORE_DATA
    length, version, msg_type = struct.unpack(">IBB", buffer[:HEADER_LEN])
    if version != VERSION:
        raise BadVersion(f"version 0x{version:02x}")
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared length {length}")
    try:
        mt = MessageType(msg_type)
    except ValueError:
        raise UnknownType(f"message type 0x{msg_type:02x}") from None
    total = HEADER_LEN + length
    if len(buffer) < total:
        return NEED_MORE_DATA
    return Frame(mt, bytes(buffer[HEADER_LEN:total])), total


class FrameDecoder:
    """Incremental stream decoder; buffers partial frames between feeds."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf.extend(data)
        frames: list[Frame] = []
        while True:
            result = decode_frame(self._buf)
            if result is NEED_MORE_DATA:
                break
            frame, consumed = result
            frames.append(frame)
            del self._buf[:consumed]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


@dataclass(frozen=True)
class Hello:
    token: str
    node_kind: int
    node_id: bytes
    name: str = ""  # textual identity: sensor id for provenance, solver id for dispatch
    # solver registration rides along in the HELLO payload
    group: str = ""
    subscription: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.node_id) != 16:
            raise BadHello("node_id must be 16 octets")


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise BadHello("string field too long")
    return struct.pack(">H", len(raw)) + raw


def _unpack_str(buf: bytes, offset: int) -> tuple[str, int]:
    if offset + 2 > len(buf):
        raise BadHello("truncated string length")
    n = struct.unpack(">H", buf[offset : offset + 2])[0]
    offset += 2
    if offset + n > len(buf):
        raise BadHello("truncated string body")
    try:
        return buf[offset : offset + n].decode("utf-8"), offset + n
    except UnicodeDecodeError as exc:
        raise BadHello("string not utf-8") from exc


def encode_hello(hello: Hello) -> bytes:
    out = _pack_str(hello.token) + bytes([hello.node_kind]) + hello.node_id
    out += _pack_str(hello.name)
    if hello.node_kind == NODE_KIND_SOLVER:
        out += _pack_str(hello.group)
        out += struct.pack(">H", len(hello.subscription))
        for rule in hello.subscription:
            out += _pack_str(rule)
    return out


def decode_hello(payload: bytes) -> Hello:
    token, offset = _unpack_str(payload, 0)
    if not token:
        raise BadHello("empty token")
    if offset + 1 + 16 > len(payload):
        raise BadHello("truncated hello")
    node_kind = payload[offset]
    if node_kind not in (NODE_KIND_SENSOR, NODE_KIND_SOLVER):
        raise BadHello(f"unknown node kind 0x{node_kind:02x}")
    offset += 1
    node_id = payload[offset : offset + 16]
    offset += 16
    name, offset = _unpack_str(payload, offset)
    group = ""
    subscription: tuple[str, ...] = ()
    if node_kind == NODE_KIND_SOLVER:
        group, offset = _unpack_str(payload, offset)
        if offset + 2 > len(payload):
            raise BadHello("truncated subscription count")
        count = struct.unpack(">H", payload[offset : offset + 2])[0]
        offset += 2
        rules = []
        for _ in range(count):
            rule, offset = _unpack_str(payload, offset)
            rules.append(rule)
        subscription = tuple(rules)
    if offset != len(payload):
        raise BadHello(f"{len(payload) - offset} trailing octets")
    return Hello(token, node_kind, node_id, name, group, subscription)


def encode_hello_ack(session_id: int) -> bytes:
    return encode_frame(MessageType.HELLO_ACK, struct.pack(">Q", session_id))


def decode_hello_ack(payload: bytes) -> int:
    if len(payload) != 8:
        raise ProtocolError("HELLO_ACK payload must be 8 octets")
    return struct.unpack(">Q", payload)[0]


def encode_error(code: int, message: str = "") -> bytes:
    return encode_frame(MessageType.ERROR, bytes([code]) + _pack_str(message))


def decode_error(payload: bytes) -> tuple[int, str]:
    if not payload:
        raise ProtocolError("empty ERROR payload")
    message, _ = _unpack_str(payload, 1)
    return payload[0], message


def encode_ack(count: int) -> bytes:
    return encode_frame(MessageType.ACK, struct.pack(">I", count))


def decode_ack(payload: bytes) -> int:
    if len(payload) != 4:
        raise ProtocolError("ACK payload must be 4 octets")
    return struct.unpack(">I", payload)[0]


def batch_records(records, max_payload_octets: int = MAX_PAYLOAD) -> list[bytes]:
    """Pack capture records into TRAFFIC_BATCH payloads, filled greedily.

    Records need ts_sec/ts_usec/raw attributes (orig_len optional, defaults
    to the captured length). No record is split across batches and order is
    preserved; a record that cannot fit alone raises RecordTooLarge.
    """
    batches: list[bytes] = []
    current: list[bytes] = []
    current_size = 4  # count field
    count = 0
    for rec in records:
        raw = rec.raw
        encoded = (
            struct.pack(
                ">QIII",
                rec.ts_sec,
                rec.ts_usec,
                getattr(rec, "orig_len", len(raw)),
                len(raw),
            )
            + raw
        )
        if 4 + len(encoded) > max_payload_octets:
            raise RecordTooLarge(f"record of {len(raw)} octets exceeds batch cap")
        if current_size + len(encoded) > max_payload_octets:
            batches.append(struct.pack(">I", count) + b"".join(current))
            current, current_size, count = [], 4, 0
        current.append(encoded)
        current_size += len(encoded)
        count += 1
    if count:
        batches.append(struct.pack(">I", count) + b"".join(current))
    return batches


@dataclass(frozen=True)
class BatchRecord:
    ts_sec: int
    ts_usec: int
    orig_len: int
    raw: bytes


def parse_batch(payload: bytes) -> list[BatchRecord]:
    if len(payload) < 4:
        raise MalformedBatch("payload shorter than the count field")
    count = struct.unpack(">I", payload[:4])[0]
    offset = 4
    records: list[BatchRecord] = []
    for _ in range(count):
        if offset + BATCH_RECORD_HEADER_LEN > len(payload):
            raise MalformedBatch("truncated record header")
        ts_sec, ts_usec, orig_len, cap_len = struct.unpack(
            ">QIII", payload[offset : offset + BATCH_RECORD_HEADER_LEN]
        )
        offset += BATCH_RECORD_HEADER_LEN
        if offset + cap_len > len(payload):
            raise MalformedBatch("truncated record payload")
        records.append(
            BatchRecord(ts_sec, ts_usec, orig_len, payload[offset : offset + cap_len])
        )
        offset += cap_len
    if offset != len(payload):
        raise MalformedBatch(f"{len(payload) - offset} trailing octets")
    return records


@dataclass
class Session:
    session_id: int
    node_kind: int
    node_id: bytes
    hello: Hello
    open: bool = True
    last_heard: float = 0.0


@dataclass
class HandshakeResult:
    session: Session | None
    reply: bytes  # HELLO_ACK on success, ERROR frame otherwise
    superseded: Session | None = None


class SessionRegistry:
    """Token admission and node-id supersession for server-side sessions."""

    def __init__(self) -> None:
        self._next_id = 1
        self.by_node: dict[bytes, Session] = {}

    def handshake(self, hello: Hello, expected_token: str, now: float = 0.0) -> HandshakeResult:
        if hello.token != expected_token:
            return HandshakeResult(None, encode_error(ERR_AUTH_FAILED, "bad token"))
        superseded = self.by_node.get(hello.node_id)
        if superseded is not None:
            superseded.open = False
        session = Session(
            session_id=self._next_id,
            node_kind=hello.node_kind,
            node_id=hello.node_id,
            hello=hello,
            last_heard=now,
        )
        self._next_id += 1
        self.by_node[hello.node_id] = session
        return HandshakeResult(session, encode_hello_ack(session.session_id), superseded)

    def close(self, session: Session) -> None:
        session.open = False
        if self.by_node.get(session.node_id) is session:
            del self.by_node[session.node_id]

    def live_sessions(self) -> list[Session]:
        return [s for s in self.by_node.values() if s.open]
