"""Alert model, canonical XML round trips, and structural validation."""

import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings, strategies as st

from dnids import idmef
from dnids.idmef import (
    CreateTime,
    EmptyClassification,
    Endpoint,
    IdmefAlert,
    MessageIdGenerator,
    MissingRequired,
    NotXml,
    Reference,
    WrongNamespace,
    build_alert,
    build_heartbeat,
    parse_xml,
    to_xml,
    validate,
)


def make_alert(**over):
    kwargs = dict(
        analyzer_id="solver-1/portscan",
        t=952596085.0,
        sources=["10.0.0.7"],
        targets=["10.0.0.1", "10.0.0.2"],
        classification="Port scan",
        severity="medium",
        generator=MessageIdGenerator(1),
    )
    kwargs.update(over)
    return build_alert(**kwargs)


class TestBuildAlert:
    def test_ntp_epoch_zero(self):
        # unix 0 is NTP 2208988800 = 0x83aa7e80, zero fraction
        alert = make_alert(t=0)
        assert alert.create_time.ntpstamp == "0x83aa7e80.0x00000000"
        assert alert.create_time.iso8601_utc == "1970-01-01T00:00:00Z"

    def test_seeded_generator_reproducible(self):
        g1, g2 = MessageIdGenerator(42), MessageIdGenerator(42)
        ids1 = [g1.next() for _ in range(5)]
        ids2 = [g2.next() for _ in range(5)]
        assert ids1 == ids2
        assert all(len(i) == 32 for i in ids1)

    def test_empty_classification(self):
        with pytest.raises(EmptyClassification):
            make_alert(classification="")

    def test_fractional_seconds_in_ntpstamp(self):
        alert = make_alert(t=1.5)
        sec_hex, frac_hex = alert.create_time.ntpstamp.split(".")
        assert int(sec_hex, 16) == 2208988801
        assert int(frac_hex, 16) == 1 << 31


class TestToXml:
    def test_minimal_document_shape(self):
        doc = to_xml(make_alert())
        root = ET.fromstring(doc)
        assert root.tag == f"{{{idmef.NAMESPACE}}}IDMEF-Message"
        assert root.get("version") == "1.0"

    def test_round_trip(self):
        alert = make_alert(additional_data=(("first_seen_mac", "02:00:00:00:00:01"),))
        assert parse_xml(to_xml(alert)) == alert

    def test_two_sources_in_order(self):
        alert = make_alert(sources=["10.0.0.9", "10.0.0.8"])
        root = ET.fromstring(to_xml(alert))
        addrs = [
            el.text
            for el in root.iter(f"{{{idmef.NAMESPACE}}}address")
        ]
        assert addrs[:2] == ["10.0.0.9", "10.0.0.8"]

    def test_invalid_alert_refused(self):
        alert = make_alert(sources=["999.1.1.1"])
        with pytest.raises(idmef.ValidationFailed):
            to_xml(alert)

    def test_heartbeat_round_trip(self):
        hb = build_heartbeat("solver-1", 100.0, 10, generator=MessageIdGenerator(3))
        assert parse_xml(to_xml(hb)) == hb


class TestParseXml:
    def test_missing_classification(self):
        alert = make_alert()
        doc = to_xml(alert).decode()
        doc = doc.replace(f'<Classification text="Port scan" />', "")
        doc = doc.replace(f'<Classification text="Port scan"/>', "")
        with pytest.raises(MissingRequired) as err:
            parse_xml(doc.encode())
        assert err.value.element == "Classification"

    def test_wrong_namespace(self):
        doc = to_xml(make_alert()).decode().replace(idmef.NAMESPACE, "http://nope")
        with pytest.raises(WrongNamespace):
            parse_xml(doc.encode())

    def test_not_xml(self):
        with pytest.raises(NotXml):
            parse_xml(b"clearly not xml <<<")

    def test_unknown_text_child_folds_into_additional_data(self):
        doc = to_xml(make_alert()).decode()
        doc = doc.replace("</Alert>", "<Oddity>extra</Oddity></Alert>")
        parsed = parse_xml(doc.encode())
        assert ("Oddity", "extra") in parsed.additional_data

    def test_unknown_structured_child_counts_warning(self):
        doc = to_xml(make_alert()).decode()
        doc = doc.replace("</Alert>", "<Oddity><deep/></Oddity></Alert>")
        parsed = parse_xml(doc.encode())
        assert parsed.parse_warnings == 1


class TestValidate:
    def test_builder_output_is_valid(self):
        assert validate(make_alert()) == []

    def test_invalid_address(self):
        alert = make_alert(sources=["999.1.1.1"])
        assert any("invalid ipv4" in v for v in validate(alert))

    def test_time_mismatch(self):
        alert = make_alert()
        skewed = IdmefAlert(
            messageid=alert.messageid,
            analyzer_id=alert.analyzer_id,
            create_time=CreateTime(
                iso8601_utc=alert.create_time.iso8601_utc,
                ntpstamp=idmef.ntpstamp_for(952596085.0 + 3600),
            ),
            sources=alert.sources,
            targets=alert.targets,
            classification_text=alert.classification_text,
        )
        assert any("time mismatch" in v for v in validate(skewed))


alert_strategy = st.builds(
    lambda t, nsrc, ntgt, cls, sev, extras, seed: build_alert(
        analyzer_id="solver-x/detector",
        t=t,
        sources=[f"10.0.{i}.{i + 1}" for i in range(nsrc)],
        targets=[f"192.168.{i}.{i + 1}" for i in range(ntgt)],
        classification=cls,
        severity=sev,
        additional_data=tuple(extras),
        generator=MessageIdGenerator(seed),
    ),
    t=st.integers(0, 2**32 - 1),
    nsrc=st.integers(0, 4),
    ntgt=st.integers(0, 4),
    cls=st.text(
        st.characters(whitelist_categories=("L", "N"), whitelist_characters=" -"),
        min_size=1,
        max_size=30,
    ),
    sev=st.sampled_from([None, "low", "medium", "high"]),
    extras=st.lists(
        st.tuples(
            st.text(st.characters(whitelist_categories=("L",)), min_size=1, max_size=10),
            st.text(st.characters(whitelist_categories=("L", "N")), max_size=20),
        ),
        max_size=3,
    ),
    seed=st.integers(0, 2**32),
)


@settings(max_examples=200, deadline=None)
@given(alert_strategy)
def test_property_round_trip(alert):
    assert parse_xml(to_xml(alert)) == alert
    assert validate(alert) == []


@given(st.integers(0, 2**32 - 1))
def test_property_ntpstamp_iso_consistency(t):
    ct = idmef.create_time_for(t)
    alert = IdmefAlert(
        messageid="0" * 32,
        analyzer_id="a",
        create_time=ct,
        sources=(),
        targets=(),
        classification_text="x",
    )
    assert not [v for v in validate(alert) if "time" in v]
