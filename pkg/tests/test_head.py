"""Head-server sessions, persistence ordering, dispatch, and alert intake."""

import struct

import pytest

from dnids import idmef, wire
from dnids.head import DispatchDecision, HeadServer, SolverRegistration, dispatch
from dnids.packet import MacAddr, build_arp, build_ipv4, flow_key
from dnids.sensor import parse_rule
from dnids.store import TrafficRecord, TrafficStore
from dnids.transport import ManualClock
from dnids.wire import FrameDecoder, Hello, MessageType

MAC_A = MacAddr.parse("02:00:00:00:00:01")
MAC_B = MacAddr.parse("02:00:00:00:00:02")
TOKEN = "tok"


@pytest.fixture
def clock():
    return ManualClock(start=1000.0)


@pytest.fixture
def head(tmp_path, clock):
    server = HeadServer(tmp_path / "store", token=TOKEN, clock=clock)
    yield server
    server.close()


def sensor_hello(name="sensor-1", node=b"\x01" * 16):
    return Hello(token=TOKEN, node_kind=wire.NODE_KIND_SENSOR, node_id=node, name=name)


def solver_hello(name="solver-1", node=b"\x51" * 16, group="g", subscription=("accept-all",)):
    return Hello(
        token=TOKEN, node_kind=wire.NODE_KIND_SOLVER, node_id=node,
        name=name, group=group, subscription=subscription,
    )


def open_session(head, hello):
    conn = head.local_connect()
    conn.send(wire.encode_frame(MessageType.HELLO, wire.encode_hello(hello)))
    frames = FrameDecoder().feed(conn.recv())
    assert frames and frames[0].msg_type == MessageType.HELLO_ACK
    return conn, FrameDecoder()


def tcp_packet(i=0, sport=1000):
    return build_ipv4(MAC_A, MAC_B, "10.0.0.1", "10.0.0.2", 6,
                      src_port=sport, dst_port=80, ts_sec=100 + i, ts_usec=0)


def send_batch(conn, packets):
    for payload in wire.batch_records(packets):
        conn.send(wire.encode_frame(MessageType.TRAFFIC_BATCH, payload))


class TestIngestBatch:
    def test_three_records_consecutive_ids_then_ack(self, head):
        conn, decoder = open_session(head, sensor_hello())
        send_batch(conn, [tcp_packet(i) for i in range(3)])
        frames = decoder.feed(conn.recv())
        assert [f.msg_type for f in frames] == [MessageType.ACK]
        assert wire.decode_ack(frames[0].payload) == 3
        records = head.query_traffic(0, 1e9)
        assert [r.record_id for r in records] == [1, 2, 3]
        assert all(r.sensor_id == "sensor-1" for r in records)
        assert records[0].flow_key == flow_key(tcp_packet(0))

    def test_malformed_batch_atomic_discard(self, head):
        conn, decoder = open_session(head, sensor_hello())
        bogus = struct.pack(">I", 5) + b"\x00" * 3  # claims 5 records, has junk
        conn.send(wire.encode_frame(MessageType.TRAFFIC_BATCH, bogus))
        frames = decoder.feed(conn.recv())
        assert frames[0].msg_type == MessageType.ERROR
        code, _ = wire.decode_error(frames[0].payload)
        assert code == wire.ERR_MALFORMED_BATCH
        assert head.query_traffic(0, 1e9) == []

    def test_duplicate_batch_dedup_off_stores_twice(self, head):
        conn, decoder = open_session(head, sensor_hello())
        send_batch(conn, [tcp_packet(1)])
        send_batch(conn, [tcp_packet(1)])
        conn.recv()
        assert len(head.query_traffic(0, 1e9)) == 2

    def test_duplicate_batch_dedup_on_stores_once(self, tmp_path, clock):
        head = HeadServer(tmp_path / "d", token=TOKEN, dedup=True, clock=clock)
        conn, decoder = open_session(head, sensor_hello())
        send_batch(conn, [tcp_packet(1)])
        send_batch(conn, [tcp_packet(1)])
        frames = decoder.feed(conn.recv())
        assert [wire.decode_ack(f.payload) for f in frames] == [1, 1]
        assert len(head.query_traffic(0, 1e9)) == 1
        head.close()

    def test_solver_cannot_send_batches(self, head):
        conn, decoder = open_session(head, solver_hello())
        send_batch(conn, [tcp_packet()])
        frames = decoder.feed(conn.recv())
        assert frames[0].msg_type == MessageType.ERROR
        assert head.query_traffic(0, 1e9) == []

    def test_durability_before_ack(self, head, tmp_path):
        conn, decoder = open_session(head, sensor_hello())
        send_batch(conn, [tcp_packet(i) for i in range(5)])
        frames = decoder.feed(conn.recv())
        assert frames and frames[0].msg_type == MessageType.ACK
        # simulate the process stopping right after the ACK: a fresh store
        # opened from disk must already hold the batch
        reopened = TrafficStore(tmp_path / "store" / "traffic")
        assert len(reopened) == 5


class TestAuth:
    def test_wrong_token_rejected(self, head):
        conn = head.local_connect()
        hello = Hello(token="wrong", node_kind=1, node_id=b"\x09" * 16)
        conn.send(wire.encode_frame(MessageType.HELLO, wire.encode_hello(hello)))
        frames = FrameDecoder().feed(conn.recv())
        assert frames[0].msg_type == MessageType.ERROR
        code, _ = wire.decode_error(frames[0].payload)
        assert code == wire.ERR_AUTH_FAILED

    def test_frames_before_hello_rejected(self, head):
        conn = head.local_connect()
        conn.send(wire.encode_frame(MessageType.HEARTBEAT))
        frames = FrameDecoder().feed(conn.recv())
        assert frames[0].msg_type == MessageType.ERROR

    def test_duplicate_node_id_supersession(self, head):
        conn1, dec1 = open_session(head, sensor_hello())
        conn2, _ = open_session(head, sensor_hello())
        frames = dec1.feed(conn1.recv())
        assert frames[0].msg_type == MessageType.ERROR
        code, _ = wire.decode_error(frames[0].payload)
        assert code == wire.ERR_SUPERSEDED

    def test_liveness_timeout_closes_session(self, head, clock):
        conn, _ = open_session(head, sensor_hello())
        session = head.connections[0].session
        clock.advance(31.0)  # > 3 x 10 s heartbeats
        closed = head.check_liveness()
        assert closed == [session]

    def test_heartbeat_keeps_session_alive(self, head, clock):
        conn, _ = open_session(head, sensor_hello())
        for _ in range(5):
            clock.advance(10.0)
            conn.send(wire.encode_frame(MessageType.HEARTBEAT))
        assert head.check_liveness() == []


def reg(solver_id, group="g", rules=("accept-all",)):
    return SolverRegistration(
        solver_id=solver_id, group=group,
        subscription=tuple(parse_rule(r) for r in rules),
    )


def record_for(pkt, record_id=1):
    return TrafficRecord(
        record_id=record_id, sensor_id="s", recv_time=0.0,
        ts_sec=pkt.ts_sec, ts_usec=pkt.ts_usec,
        flow_key=flow_key(pkt), orig_len=len(pkt.raw), raw=pkt.raw,
    )


class TestDispatch:
    def test_one_group_flow_affinity(self):
        regs = [reg("b"), reg("a")]
        first = dispatch(record_for(tcp_packet(0)), regs)
        assert len(first.chosen) == 1
        for i in range(5):
            again = dispatch(record_for(tcp_packet(i), record_id=i + 1), regs)
            assert again.chosen == first.chosen  # same flow, same solver

    def test_zero_registrations(self):
        decision = dispatch(record_for(tcp_packet()), [])
        assert decision == DispatchDecision(record_id=1, chosen=())

    def test_two_groups_one_each(self):
        regs = [reg("a", group="g1"), reg("b", group="g1"),
                reg("c", group="g2"), reg("d", group="g2")]
        decision = dispatch(record_for(tcp_packet()), regs)
        assert len(decision.chosen) == 2
        chosen_groups = {r.group for r in regs if r.solver_id in decision.chosen}
        assert chosen_groups == {"g1", "g2"}

    def test_subscription_filters_groups(self):
        regs = [reg("a", rules=("proto = 17",)), reg("b", group="h", rules=("proto = 6",))]
        decision = dispatch(record_for(tcp_packet()), regs)  # TCP record
        assert decision.chosen == ("b",)

    def test_keyless_record_goes_to_first_member(self):
        arp = build_arp(2, MAC_A, "10.0.0.1", MAC_B, "10.0.0.2")
        record = TrafficRecord(
            record_id=1, sensor_id="s", recv_time=0.0, ts_sec=0, ts_usec=0,
            flow_key=None, orig_len=len(arp.raw), raw=arp.raw,
        )
        regs = [reg("zeta", rules=("arp",)), reg("alpha", rules=("arp",))]
        assert dispatch(record, regs).chosen == ("alpha",)

    def test_per_group_exclusivity_property(self):
        regs = [reg(f"s{i}") for i in range(4)]
        for i in range(50):
            pkt = build_ipv4(MAC_A, MAC_B, "10.0.0.1", f"10.0.1.{i + 1}", 6,
                             src_port=1000 + i, dst_port=80)
            decision = dispatch(record_for(pkt, record_id=i + 1), regs)
            assert len(decision.chosen) == 1


class TestDispatchDelivery:
    def test_record_pushed_to_matching_solver(self, head):
        solver_conn, solver_dec = open_session(head, solver_hello())
        sensor_conn, _ = open_session(head, sensor_hello())
        send_batch(sensor_conn, [tcp_packet()])
        frames = solver_dec.feed(solver_conn.recv())
        assert [f.msg_type for f in frames] == [MessageType.TRAFFIC_BATCH]
        records = wire.parse_batch(frames[0].payload)
        assert len(records) == 1
        assert records[0].raw == tcp_packet().raw

    def test_no_matching_solver_record_still_stored(self, head):
        solver_conn, solver_dec = open_session(
            head, solver_hello(subscription=("proto = 17",))
        )
        sensor_conn, _ = open_session(head, sensor_hello())
        send_batch(sensor_conn, [tcp_packet()])  # TCP, subscription wants UDP
        assert solver_dec.feed(solver_conn.recv()) == []
        assert len(head.query_traffic(0, 1e9)) == 1


def make_alert_xml(classification="Port scan", msg_seed=1):
    alert = idmef.build_alert(
        analyzer_id="solver-1/portscan",
        t=100.0,
        sources=["10.0.0.7"],
        targets=["10.0.0.1"],
        classification=classification,
        generator=idmef.MessageIdGenerator(msg_seed),
    )
    return idmef.to_xml(alert)


class TestIngestAlert:
    def test_valid_alert_stored_and_acked(self, head):
        conn, decoder = open_session(head, solver_hello())
        conn.send(wire.encode_frame(MessageType.ALERT, make_alert_xml()))
        frames = decoder.feed(conn.recv())
        assert frames[0].msg_type == MessageType.ACK
        rows = head.query_alerts(classification_text="Port scan")
        assert len(rows) == 1
        assert rows[0].solver_id == "solver-1"

    def test_missing_classification_rejected(self, head):
        conn, decoder = open_session(head, solver_hello())
        doc = make_alert_xml().decode()
        start = doc.index("<Classification")
        end = doc.index("/>", start) + 2
        conn.send(wire.encode_frame(MessageType.ALERT, (doc[:start] + doc[end:]).encode()))
        frames = decoder.feed(conn.recv())
        assert frames[0].msg_type == MessageType.ERROR
        code, _ = wire.decode_error(frames[0].payload)
        assert code == wire.ERR_INVALID_IDMEF
        assert head.query_alerts() == []

    def test_duplicate_messageid_flagged(self, head):
        conn, decoder = open_session(head, solver_hello())
        doc = make_alert_xml(msg_seed=7)
        conn.send(wire.encode_frame(MessageType.ALERT, doc))
        conn.send(wire.encode_frame(MessageType.ALERT, doc))
        conn.recv()
        rows = head.query_alerts()
        assert [r.duplicate for r in rows] == [False, True]

    def test_sensor_cannot_send_alerts(self, head):
        conn, decoder = open_session(head, sensor_hello())
        conn.send(wire.encode_frame(MessageType.ALERT, make_alert_xml()))
        frames = decoder.feed(conn.recv())
        assert frames[0].msg_type == MessageType.ERROR
        assert head.query_alerts() == []

    def test_alert_store_only_validated_documents(self, head):
        conn, _ = open_session(head, solver_hello())
        conn.send(wire.encode_frame(MessageType.ALERT, b"<not-idmef/>"))
        conn.send(wire.encode_frame(MessageType.ALERT, make_alert_xml()))
        rows = head.query_alerts()
        assert len(rows) == 1
        assert idmef.validate(idmef.parse_xml(rows[0].xml)) == []


class TestQueries:
    def test_query_traffic_flow_filter_both_directions(self, head):
        conn, _ = open_session(head, sensor_hello())
        fwd = tcp_packet(0)
        rev = build_ipv4(MAC_B, MAC_A, "10.0.0.2", "10.0.0.1", 6,
                         src_port=80, dst_port=1000, ts_sec=101)
        other = build_ipv4(MAC_A, MAC_B, "10.0.0.1", "10.0.0.9", 6,
                           src_port=1000, dst_port=80, ts_sec=102)
        send_batch(conn, [fwd, rev, other])
        records = head.query_traffic(0, 1e9, flow_filter=flow_key(fwd))
        assert [r.record_id for r in records] == [1, 2]

    def test_bye_closes_session(self, head):
        conn, _ = open_session(head, sensor_hello())
        conn.send(wire.encode_frame(MessageType.BYE))
        assert head.registry.live_sessions() == []
