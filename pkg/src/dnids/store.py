"""Embedded file-backed stores for captured traffic and validated alerts.

TrafficStore is a document-oriented append-only log: segments of
length-prefixed, CRC-32-framed canonical JSON documents with a sidecar
index, rolled at 64 MiB. AlertStore keeps relational-style rows as JSON
lines with an in-memory index rebuilt on open. Both sit behind small
interfaces that an external database could implement instead.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

from .packet import FlowKey

SEGMENT_PATTERN = "seg-%08d.log"
INDEX_NAME = "index"
ROWS_NAME = "rows.log"
ROLL_THRESHOLD = 64 * 1024 * 1024
RECORD_HEADER = struct.Struct(">II")  # doc length, crc32 over doc octets


class StoreError(Exception):
    pass


class IoFailure(StoreError):
    pass


class CorruptInterior(StoreError):
    """CRC failure before the tail; the store opens read-only."""


class BadRange(StoreError):
    pass


@dataclass(frozen=True)
class TrafficRecord:
    record_id: int | None
    sensor_id: str
    recv_time: float
    ts_sec: int
    ts_usec: int
    flow_key: FlowKey | None
    orig_len: int
    raw: bytes

    def to_document(self) -> bytes:
        """Canonical textual encoding: sorted field names, compact JSON."""
        flow = None
        if self.flow_key is not None:
            flow = [
                self.flow_key.proto,
                [self.flow_key.lo[0], self.flow_key.lo[1]],
                [self.flow_key.hi[0], self.flow_key.hi[1]],
            ]
        doc = {
            "flow": flow,
            "orig_len": self.orig_len,
            "raw": self.raw.hex(),
            "record_id": self.record_id,
            "recv_time": self.recv_time,
            "sensor_id": self.sensor_id,
            "ts_sec": self.ts_sec,
            "ts_usec": self.ts_usec,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_document(cls, doc: bytes) -> "TrafficRecord":
        d = json.loads(doc)
        flow = None
        if d["flow"] is not None:
            proto, lo, hi = d["flow"]
            flow = FlowKey(proto, (lo[0], lo[1]), (hi[0], hi[1]))
        return cls(
            record_id=d["record_id"],
            sensor_id=d["sensor_id"],
            recv_time=d["recv_time"],
            ts_sec=d["ts_sec"],
            ts_usec=d["ts_usec"],
            flow_key=flow,
            orig_len=d["orig_len"],
            raw=bytes.fromhex(d["raw"]),
        )


@dataclass
class _IndexEntry:
    segment: int
    offset: int
    ts_sec: int
    ts_usec: int
    flow_key: FlowKey | None


class TrafficStore:
    """Single-writer append-only store; flush is the durability barrier."""

    def __init__(self, directory: str | Path, roll_threshold: int = ROLL_THRESHOLD):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.roll_threshold = roll_threshold
        self.read_only = False
        self._index: dict[int, _IndexEntry] = {}
        self._order: list[int] = []
        self._next_id = 1
        self._current_segment = 0
        self._writer = None
        self._recover()

    # -- recovery ---------------------------------------------------------

    def _segment_path(self, seg: int) -> Path:
        return self.directory / (SEGMENT_PATTERN % seg)

    def _segment_numbers(self) -> list[int]:
        out = []
        for p in sorted(self.directory.glob("seg-*.log")):
            try:
                out.append(int(p.stem.split("-")[1]))
            except (IndexError, ValueError):
                continue
        return sorted(out)

    def _recover(self) -> None:
        segments = self._segment_numbers()
        for seg in segments:
            is_last = seg == segments[-1]
            path = self._segment_path(seg)
            data = path.read_bytes()
            offset = 0
            good_end = 0
            while offset < len(data):
                if offset + RECORD_HEADER.size > len(data):
                    break  # torn header
                length, crc = RECORD_HEADER.unpack_from(data, offset)
                body_start = offset + RECORD_HEADER.size
                if body_start + length > len(data):
                    break  # torn payload
                doc = data[body_start : body_start + length]
                if zlib.crc32(doc) != crc:
                    break  # corrupt record
                record = TrafficRecord.from_document(doc)
                self._index[record.record_id] = _IndexEntry(
                    seg, offset, record.ts_sec, record.ts_usec, record.flow_key
                )
                self._order.append(record.record_id)
                self._next_id = max(self._next_id, record.record_id + 1)
                offset = body_start + length
                good_end = offset
            if good_end < len(data):
                if is_last:
                    # torn or crc-failing tail: discard everything after the
                    # last intact boundary
                    with open(path, "r+b") as f:
                        f.truncate(good_end)
                else:
                    self.read_only = True
                    raise CorruptInterior(
                        f"segment {seg} corrupt at offset {good_end}, not at tail"
                    )
        self._current_segment = segments[-1] if segments else 0
        self._rewrite_index_file()

    def _rewrite_index_file(self) -> None:
        lines = [
            f"{rid} {e.segment} {e.offset}\n"
            for rid, e in ((r, self._index[r]) for r in self._order)
        ]
        try:
            (self.directory / INDEX_NAME).write_text("".join(lines))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    # -- writes -----------------------------------------------------------

    def _open_writer(self):
        if self._writer is None:
            path = self._segment_path(self._current_segment)
            self._writer = open(path, "ab")
        return self._writer

    def append(self, record: TrafficRecord) -> int:
        if self.read_only:
            raise IoFailure("store is read-only after interior corruption")
        record_id = self._next_id
        record = TrafficRecord(
            record_id=record_id,
            sensor_id=record.sensor_id,
            recv_time=record.recv_time,
            ts_sec=record.ts_sec,
            ts_usec=record.ts_usec,
            flow_key=record.flow_key,
            orig_len=record.orig_len,
            raw=record.raw,
        )
        doc = record.to_document()
        writer = self._open_writer()
        offset = writer.tell()
        try:
            writer.write(RECORD_HEADER.pack(len(doc), zlib.crc32(doc)))
            writer.write(doc)
            writer.flush()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self._index[record_id] = _IndexEntry(
            self._current_segment, offset, record.ts_sec, record.ts_usec, record.flow_key
        )
        self._order.append(record_id)
        self._next_id += 1
        with open(self.directory / INDEX_NAME, "a") as idx:
            idx.write(f"{record_id} {self._current_segment} {offset}\n")
        if writer.tell() >= self.roll_threshold:
            writer.close()
            self._writer = None
            self._current_segment += 1
        return record_id

    def flush(self) -> None:
        if self._writer is not None:
            try:
                self._writer.flush()
                os.fsync(self._writer.fileno())
            except OSError as exc:
                raise IoFailure(str(exc)) from exc

    def close(self) -> None:
        if self._writer is not None:
            self.flush()
            self._writer.close()
            self._writer = None

    # -- reads ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._order)

    def get(self, record_id: int) -> TrafficRecord:
        entry = self._index[record_id]
        with open(self._segment_path(entry.segment), "rb") as f:
            f.seek(entry.offset)
            header = f.read(RECORD_HEADER.size)
            length, _crc = RECORD_HEADER.unpack(header)
            return TrafficRecord.from_document(f.read(length))

    def scan(self):
        for rid in self._order:
            yield self.get(rid)

    def query(
        self,
        ts_start: float,
        ts_end: float,
        flow_filter: FlowKey | None = None,
        limit: int = 1000,
    ) -> list[TrafficRecord]:
        """Records with capture ts in [ts_start, ts_end], ascending record_id."""
        if ts_start > ts_end:
            raise BadRange(f"start {ts_start} after end {ts_end}")
        out = []
        for rid in self._order:
            entry = self._index[rid]
            ts = entry.ts_sec + entry.ts_usec / 1e6
            if not ts_start <= ts <= ts_end:
                continue
            if flow_filter is not None and entry.flow_key != flow_filter:
                continue
            out.append(self.get(rid))
            if len(out) >= limit:
                break
        return out


@dataclass(frozen=True)
class AlertRow:
    alert_id: int | None
    received_time: float
    solver_id: str
    messageid: str
    classification_text: str
    analyzer_id: str
    severity: str | None
    duplicate: bool
    xml: bytes

    def to_line(self) -> str:
        doc = {
            "alert_id": self.alert_id,
            "analyzer_id": self.analyzer_id,
            "classification_text": self.classification_text,
            "duplicate": self.duplicate,
            "messageid": self.messageid,
            "received_time": self.received_time,
            "severity": self.severity,
            "solver_id": self.solver_id,
            "xml": self.xml.decode("utf-8"),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "AlertRow":
        d = json.loads(line)
        return cls(
            alert_id=d["alert_id"],
            received_time=d["received_time"],
            solver_id=d["solver_id"],
            messageid=d["messageid"],
            classification_text=d["classification_text"],
            analyzer_id=d["analyzer_id"],
            severity=d["severity"],
            duplicate=d["duplicate"],
            xml=d["xml"].encode("utf-8"),
        )


class AlertStore:
    """Relational-style store: JSON-line rows, in-memory index on open."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._rows: list[AlertRow] = []
        self._seen_messageids: set[str] = set()
        self._next_id = 1
        self._path = self.directory / ROWS_NAME
        self._writer = None
        self._recover()

    def _recover(self) -> None:
        if not self._path.exists():
            return
        for line in self._path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                row = AlertRow.from_line(line)
            except (json.JSONDecodeError, KeyError):
                break  # torn tail line; earlier rows stand
            self._rows.append(row)
            self._seen_messageids.add(row.messageid)
            self._next_id = max(self._next_id, row.alert_id + 1)

    def insert(self, row: AlertRow) -> int:
        alert_id = self._next_id
        duplicate = row.messageid in self._seen_messageids
        row = AlertRow(
            alert_id=alert_id,
            received_time=row.received_time,
            solver_id=row.solver_id,
            messageid=row.messageid,
            classification_text=row.classification_text,
            analyzer_id=row.analyzer_id,
            severity=row.severity,
            duplicate=duplicate,
            xml=row.xml,
        )
        if self._writer is None:
            self._writer = open(self._path, "a")
        try:
            self._writer.write(row.to_line() + "\n")
            self._writer.flush()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self._rows.append(row)
        self._seen_messageids.add(row.messageid)
        self._next_id += 1
        return alert_id

    def flush(self) -> None:
        if self._writer is not None:
            try:
                self._writer.flush()
                os.fsync(self._writer.fileno())
            except OSError as exc:
                raise IoFailure(str(exc)) from exc

    def close(self) -> None:
        if self._writer is not None:
            self.flush()
            self._writer.close()
            self._writer = None

    def __len__(self) -> int:
        return len(self._rows)

    def query(
        self,
        classification_text: str | None = None,
        analyzer_id: str | None = None,
        time_range: tuple[float, float] | None = None,
        limit: int = 1000,
    ) -> list[AlertRow]:
        """Conjunction of the provided criteria, ordered by received time."""
        if time_range is not None and time_range[0] > time_range[1]:
            raise BadRange(f"start {time_range[0]} after end {time_range[1]}")
        out = []
        for row in sorted(self._rows, key=lambda r: (r.received_time, r.alert_id)):
            if classification_text is not None and row.classification_text != classification_text:
                continue
            if analyzer_id is not None and row.analyzer_id != analyzer_id:
                continue
            if time_range is not None and not (
                time_range[0] <= row.received_time <= time_range[1]
            ):
                continue
            out.append(row)
            if len(out) >= limit:
                break
        return out
