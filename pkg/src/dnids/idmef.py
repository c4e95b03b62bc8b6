"""RFC 4765 alert and heartbeat messages: model, canonical XML, validation.

Covers the Alert and Heartbeat classes with Analyzer, CreateTime,
Source/Target addresses, Classification, Assessment severity, and
AdditionalData. Serialization is canonical (fixed element order, no
insignificant whitespace) so documents are byte-comparable.
"""

from __future__ import annotations

import random
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone

NAMESPACE = "http://iana.org/idmef"
NTP_EPOCH_OFFSET = 2208988800  # seconds between 1900-01-01 and 1970-01-01

SEVERITIES = ("low", "medium", "high")


class IdmefError(Exception):
    pass


class EmptyClassification(IdmefError):
    pass


class NotXml(IdmefError):
    pass


class WrongNamespace(IdmefError):
    pass


class MissingRequired(IdmefError):
    def __init__(self, element: str):
        super().__init__(f"missing required element {element}")
        self.element = element


class ValidationFailed(IdmefError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class Endpoint:
    address: str
    category: str = "ipv4-addr"


@dataclass(frozen=True)
class Reference:
    origin: str
    name: str
    url: str


@dataclass(frozen=True)
class CreateTime:
    iso8601_utc: str
    ntpstamp: str


@dataclass(frozen=True)
class IdmefAlert:
    messageid: str
    analyzer_id: str
    create_time: CreateTime
    sources: tuple[Endpoint, ...]
    targets: tuple[Endpoint, ...]
    classification_text: str
    references: tuple[Reference, ...] = ()
    severity: str | None = None
    additional_data: tuple[tuple[str, str], ...] = ()  # (meaning, value) pairs
    parse_warnings: int = field(default=0, compare=False)


@dataclass(frozen=True)
class IdmefHeartbeat:
    messageid: str
    analyzer_id: str
    create_time: CreateTime
    heartbeat_interval_s: int
    parse_warnings: int = field(default=0, compare=False)


class MessageIdGenerator:
    """Seeded 128-bit id source; a fixed seed reproduces the sequence."""

    def __init__(self, seed: int | None = None):
        self._rng = random.Random(seed)

    def next(self) -> str:
        return f"{self._rng.getrandbits(128):032x}"


def ntpstamp_for(t: float) -> str:
    sec = int(t)
    frac = int(round((t - sec) * (1 << 32)))
    if frac >= 1 << 32:
        sec += 1
        frac = 0
    return f"0x{sec + NTP_EPOCH_OFFSET:08x}.0x{frac:08x}"


def iso8601_for(t: float) -> str:
    return datetime.fromtimestamp(int(t), tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )


def create_time_for(t: float) -> CreateTime:
    return CreateTime(iso8601_utc=iso8601_for(t), ntpstamp=ntpstamp_for(t))


def build_alert(
    analyzer_id: str,
    t: float,
    sources: list[str],
    targets: list[str],
    classification: str,
    references: tuple[Reference, ...] = (),
    severity: str | None = None,
    additional_data: tuple[tuple[str, str], ...] = (),
    generator: MessageIdGenerator | None = None,
) -> IdmefAlert:
    if not classification:
        raise EmptyClassification("classification text must be non-empty")
    gen = generator if generator is not None else _default_generator
    return IdmefAlert(
        messageid=gen.next(),
        analyzer_id=analyzer_id,
        create_time=create_time_for(t),
        sources=tuple(Endpoint(a) for a in sources),
        targets=tuple(Endpoint(a) for a in targets),
        classification_text=classification,
        references=tuple(references),
        severity=severity,
        additional_data=tuple(additional_data),
    )


def build_heartbeat(
    analyzer_id: str,
    t: float,
    interval_s: int,
    generator: MessageIdGenerator | None = None,
) -> IdmefHeartbeat:
    gen = generator if generator is not None else _default_generator
    return IdmefHeartbeat(
        messageid=gen.next(),
        analyzer_id=analyzer_id,
        create_time=create_time_for(t),
        heartbeat_interval_s=interval_s,
    )


_default_generator = MessageIdGenerator()


def _endpoint_element(tag: str, ep: Endpoint) -> ET.Element:
    el = ET.Element(tag)
    node = ET.SubElement(el, "Node")
    addr = ET.SubElement(node, "Address", {"category": ep.category})
    ET.SubElement(addr, "address").text = ep.address
    return el


def _common_children(msg: IdmefAlert | IdmefHeartbeat, parent: ET.Element) -> None:
    ET.SubElement(parent, "Analyzer", {"analyzerid": msg.analyzer_id})
    ct = ET.SubElement(parent, "CreateTime", {"ntpstamp": msg.create_time.ntpstamp})
    ct.text = msg.create_time.iso8601_utc


def to_xml(msg: IdmefAlert | IdmefHeartbeat) -> bytes:
    """Canonical UTF-8 document; alerts must pass validate() first."""
    if isinstance(msg, IdmefAlert):
        violations = validate(msg)
        if violations:
            raise ValidationFailed(violations)
    root = ET.Element("IDMEF-Message", {"version": "1.0", "xmlns": NAMESPACE})
    if isinstance(msg, IdmefAlert):
        alert = ET.SubElement(root, "Alert", {"messageid": msg.messageid})
        _common_children(msg, alert)
        for ep in msg.sources:
            alert.append(_endpoint_element("Source", ep))
        for ep in msg.targets:
            alert.append(_endpoint_element("Target", ep))
        cls = ET.SubElement(alert, "Classification", {"text": msg.classification_text})
        for ref in msg.references:
            rel = ET.SubElement(cls, "Reference", {"origin": ref.origin})
            ET.SubElement(rel, "name").text = ref.name
            ET.SubElement(rel, "url").text = ref.url
        if msg.severity is not None:
            assessment = ET.SubElement(alert, "Assessment")
            ET.SubElement(assessment, "Impact", {"severity": msg.severity})
        for meaning, value in msg.additional_data:
            ad = ET.SubElement(
                alert, "AdditionalData", {"type": "string", "meaning": meaning}
            )
            ET.SubElement(ad, "string").text = value
    else:
        hb = ET.SubElement(root, "Heartbeat", {"messageid": msg.messageid})
        _common_children(msg, hb)
        ET.SubElement(hb, "HeartbeatInterval").text = str(msg.heartbeat_interval_s)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def _localname(tag: str) -> tuple[str, str]:
    if tag.startswith("{"):
        ns, _, local = tag[1:].partition("}")
        return ns, local
    return "", tag


def _parse_endpoint(el: ET.Element, ns: str) -> Endpoint:
    addr_el = el.find(f"{{{ns}}}Node/{{{ns}}}Address") if ns else el.find("Node/Address")
    if addr_el is None:
        return Endpoint(address="", category="ipv4-addr")
    text_el = addr_el.find(f"{{{ns}}}address" if ns else "address")
    return Endpoint(
        address=(text_el.text or "") if text_el is not None else "",
        category=addr_el.get("category", "ipv4-addr"),
    )


def parse_xml(octets: bytes) -> IdmefAlert | IdmefHeartbeat:
    """Parse a document back to the model.

    Strict on required elements; tolerant of unknown children, which are
    folded into additional_data when they carry plain text and counted as
    warnings otherwise.
    """
    try:
        root = ET.fromstring(octets)
    except ET.ParseError as exc:
        raise NotXml(str(exc)) from exc
    ns, local = _localname(root.tag)
    if local != "IDMEF-Message":
        raise NotXml(f"root element is {local}, not IDMEF-Message")
    if ns != NAMESPACE:
        raise WrongNamespace(f"namespace {ns!r}")
    body = None
    kind = None
    for child in root:
        _, childname = _localname(child.tag)
        if childname in ("Alert", "Heartbeat"):
            body, kind = child, childname
            break
    if body is None:
        raise MissingRequired("Alert")

    analyzer_id = ""
    create_time = None
    sources: list[Endpoint] = []
    targets: list[Endpoint] = []
    classification_text = None
    references: list[Reference] = []
    severity = None
    additional: list[tuple[str, str]] = []
    interval = None
    warnings = 0

    for child in body:
        _, name = _localname(child.tag)
        if name == "Analyzer":
            analyzer_id = child.get("analyzerid", "")
        elif name == "CreateTime":
            create_time = CreateTime(
                iso8601_utc=child.text or "", ntpstamp=child.get("ntpstamp", "")
            )
        elif name == "Source":
            sources.append(_parse_endpoint(child, ns))
        elif name == "Target":
            targets.append(_parse_endpoint(child, ns))
        elif name == "Classification":
            classification_text = child.get("text", "")
            for rel in child:
                _, rname = _localname(rel.tag)
                if rname != "Reference":
                    warnings += 1
                    continue
                name_el = rel.find(f"{{{ns}}}name" if ns else "name")
                url_el = rel.find(f"{{{ns}}}url" if ns else "url")
                references.append(
                    Reference(
                        origin=rel.get("origin", "unknown"),
                        name=name_el.text if name_el is not None else "",
                        url=url_el.text if url_el is not None else "",
                    )
                )
        elif name == "Assessment":
            impact = child.find(f"{{{ns}}}Impact" if ns else "Impact")
            if impact is not None:
                severity = impact.get("severity")
        elif name == "AdditionalData":
            value_el = child.find(f"{{{ns}}}string" if ns else "string")
            additional.append(
                (child.get("meaning", ""), value_el.text or "" if value_el is not None else "")
            )
        elif name == "HeartbeatInterval":
            try:
                interval = int(child.text or "")
            except ValueError:
                warnings += 1
        else:
            # unknown element: keep plain text, otherwise count and move on
            if child.text and child.text.strip() and len(child) == 0:
                additional.append((name, child.text.strip()))
            else:
                warnings += 1

    if create_time is None:
        raise MissingRequired("CreateTime")
    messageid = body.get("messageid", "")
    if kind == "Heartbeat":
        return IdmefHeartbeat(
            messageid=messageid,
            analyzer_id=analyzer_id,
            create_time=create_time,
            heartbeat_interval_s=interval if interval is not None else 0,
            parse_warnings=warnings,
        )
    if classification_text is None:
        raise MissingRequired("Classification")
    return IdmefAlert(
        messageid=messageid,
        analyzer_id=analyzer_id,
        create_time=create_time,
        sources=tuple(sources),
        targets=tuple(targets),
        classification_text=classification_text,
        references=tuple(references),
        severity=severity,
        additional_data=tuple(additional),
        parse_warnings=warnings,
    )


_ISO_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$")
_NTP_RE = re.compile(r"^0x([0-9a-f]+)\.0x([0-9a-f]{8})$")
_IPV4_RE = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")


def _valid_ipv4(text: str) -> bool:
    m = _IPV4_RE.match(text)
    return bool(m) and all(int(part) <= 255 for part in m.groups())


def validate(alert: IdmefAlert) -> list[str]:
    """Structural checks; returns violations (empty list means valid)."""
    violations: list[str] = []
    if not alert.classification_text:
        violations.append("empty classification text")
    if not alert.analyzer_id:
        violations.append("missing analyzer id")
    if not re.fullmatch(r"[0-9a-f]{32}", alert.messageid or ""):
        violations.append("messageid is not 32 hex chars")
    if alert.severity is not None and alert.severity not in SEVERITIES:
        violations.append(f"unknown severity {alert.severity!r}")
    for ep in alert.sources + alert.targets:
        if not _valid_ipv4(ep.address):
            violations.append(f"invalid ipv4 address {ep.address!r}")
    ct = alert.create_time
    if ct is None or not ct.iso8601_utc or not ct.ntpstamp:
        violations.append("missing create time")
        return violations
    if not _ISO_RE.match(ct.iso8601_utc):
        violations.append(f"bad iso8601 time {ct.iso8601_utc!r}")
        return violations
    m = _NTP_RE.match(ct.ntpstamp)
    if not m:
        violations.append(f"bad ntpstamp {ct.ntpstamp!r}")
        return violations
    iso_unix = datetime.strptime(ct.iso8601_utc, "%Y-%m-%dT%H:%M:%SZ").replace(
        tzinfo=timezone.utc
    ).timestamp()
    ntp_unix = int(m.group(1), 16) - NTP_EPOCH_OFFSET
    if abs(ntp_unix - iso_unix) > 1:
        violations.append("time mismatch between ntpstamp and iso8601")
    return violations
