"""Segment simulation: MAC learning, ARP, mirror loss, redirect coverage."""

import itertools

import pytest

from dnids.packet import MacAddr
from dnids.redirect import plan_redirect, poison_frames, restore_frames
from dnids.sim import (
    ARP_RESOLVED,
    CONSUMED,
    DELIVERED,
    DuplicateAddress,
    FLOODED,
    FrameTemplate,
    HostSpec,
    INJECTED,
    MIRROR_DROPPED,
    MIRRORED,
    MirrorSpec,
    PortConflict,
    ScriptEntry,
    Segment,
    TapSpec,
    apply_arp,
    build_segment,
    conservation_counts,
    coverage,
)


def endpoint(i: int) -> HostSpec:
    return HostSpec(
        host_id=f"h{i}",
        ip=f"10.0.0.{i}",
        mac=MacAddr(bytes([2, 0, 0, 0, 0, i])),
        port=i,
    )


def sensor_spec(port=9) -> HostSpec:
    return HostSpec(
        host_id="sensor",
        ip="10.0.0.99",
        mac=MacAddr(bytes([2, 0, 0, 0, 0, 0x99])),
        port=port,
        role="sensor",
    )


def four_hosts_and_sensor(mirror=None, tap=None, **kw):
    hosts = [endpoint(i) for i in range(1, 5)] + [sensor_spec()]
    return build_segment(hosts, mirror=mirror, tap=tap, **kw)


def tcp_entry(t, src, dst_ip, dport=80, sport=1000):
    return ScriptEntry(
        t=t, src_host=src,
        template=FrameTemplate(dst_ip=dst_ip, proto=6, src_port=sport,
                               dst_port=dport, payload_len=10, tcp_flags=0x02),
    )


def all_ordered_pairs(n=4):
    ips = [f"10.0.0.{i}" for i in range(1, n + 1)]
    return set(itertools.permutations(ips, 2))


class TestBuildSegment:
    def test_two_hosts_empty_fdb(self):
        seg = build_segment([endpoint(1), endpoint(2)])
        assert seg.switch.fdb == {}
        assert seg.clock == 0

    def test_duplicate_mac(self):
        h1 = endpoint(1)
        h2 = HostSpec("h2", "10.0.0.2", h1.mac, 2)
        with pytest.raises(DuplicateAddress):
            build_segment([h1, h2])

    def test_duplicate_ip(self):
        h2 = HostSpec("h2", "10.0.0.1", MacAddr(bytes([2, 0, 0, 0, 0, 9])), 2)
        with pytest.raises(DuplicateAddress):
            build_segment([endpoint(1), h2])

    def test_port_conflict(self):
        h2 = HostSpec("h2", "10.0.0.2", MacAddr(bytes([2, 0, 0, 0, 0, 9])), 1)
        with pytest.raises(PortConflict):
            build_segment([endpoint(1), h2])

    def test_same_config_same_digest(self):
        assert (
            build_segment([endpoint(1)], seed=5).digest()
            == build_segment([endpoint(1)], seed=5).digest()
        )

    def test_different_seed_different_digest(self):
        assert (
            build_segment([endpoint(1)], seed=5).digest()
            != build_segment([endpoint(1)], seed=6).digest()
        )


class TestMacLearning:
    def test_first_exchange_arp_then_unicast(self):
        seg = build_segment([endpoint(1), endpoint(2), endpoint(3)])
        seg.run([tcp_entry(0, "h1", "10.0.0.2"), tcp_entry(10, "h1", "10.0.0.2")], 20)
        kinds = [e.event for e in seg.log.events]
        # ARP request broadcast floods; reply resolves; data goes unicast
        assert FLOODED in kinds
        assert ARP_RESOLVED in kinds
        ipv4_uids = [u for u, f in seg.log.frames.items() if f.is_ipv4]
        assert len(ipv4_uids) == 2
        for uid in ipv4_uids:
            events = [e.event for e in seg.log.events if e.uid == uid]
            assert events == [INJECTED, DELIVERED]  # never flooded

    def test_unknown_destination_after_fdb_expiry_floods(self):
        # ARP cache outlives the forwarding table, so the next data frame
        # floods until the destination transmits again
        seg = build_segment(
            [endpoint(1), endpoint(2), endpoint(3)],
            arp_ttl_ticks=100_000, fdb_ttl_ticks=50,
        )
        seg.run([tcp_entry(0, "h1", "10.0.0.2"), tcp_entry(100, "h1", "10.0.0.2")], 150)
        second_data_uid = max(u for u, f in seg.log.frames.items() if f.is_ipv4)
        events = [e.event for e in seg.log.events if e.uid == second_data_uid]
        assert FLOODED in events

    def test_broadcast_delivered_to_all_but_ingress(self):
        seg = build_segment([endpoint(i) for i in range(1, 5)])
        # an ARP request is a broadcast frame
        seg.run([tcp_entry(0, "h1", "10.0.0.2")], 1)
        request_uid = next(u for u, f in seg.log.frames.items() if f.is_arp)
        delivered = [
            e for e in seg.log.events if e.uid == request_uid and e.event == DELIVERED
        ]
        assert len(delivered) == 3  # every port except the sender's


class TestMirror:
    def test_capacity_two_five_frames(self):
        seg = build_segment(
            [endpoint(1), endpoint(2), sensor_spec(port=9)],
            mirror=MirrorSpec(port=9, capacity_frames_per_tick=2),
        )
        # warm caches and fdb first so tick 40 carries pure unicast data
        warmup = [tcp_entry(0, "h1", "10.0.0.2"), tcp_entry(10, "h2", "10.0.0.1")]
        load = [tcp_entry(40, "h1", "10.0.0.2", dport=80 + i) for i in range(3)]
        load += [tcp_entry(40, "h2", "10.0.0.1", dport=90 + i) for i in range(2)]
        seg.run(warmup + load, 50)
        at_40 = [e for e in seg.log.events if e.tick == 40]
        assert sum(1 for e in at_40 if e.event == MIRRORED) == 2
        assert sum(1 for e in at_40 if e.event == MIRROR_DROPPED) == 3
        assert sum(1 for e in at_40 if e.event == DELIVERED) == 5

    def test_mirror_copies_never_block_originals(self):
        seg = build_segment(
            [endpoint(1), endpoint(2), sensor_spec(port=9)],
            mirror=MirrorSpec(port=9, capacity_frames_per_tick=1),
        )
        entries = [tcp_entry(0, "h1", "10.0.0.2"),
                   tcp_entry(20, "h1", "10.0.0.2", dport=81),
                   tcp_entry(20, "h1", "10.0.0.2", dport=82)]
        seg.run(entries, 30)
        counts = conservation_counts(seg.log)
        assert counts["mirror_drops"] >= 1
        assert counts["delivered"] + counts["consumed"] + counts["dropped"] == counts["injected"]


class TestApplyArp:
    def test_poison_updates_victim_cache(self):
        seg = four_hosts_and_sensor()
        plan = plan_redirect(
            {"10.0.0.1", "10.0.0.2"}, seg.truth, seg.hosts["sensor"].mac, "10.0.0.99"
        )
        apply_arp(seg, poison_frames(plan), t=0)
        h1 = seg.hosts["h1"]
        assert h1.cache_lookup("10.0.0.2", 0) == seg.hosts["sensor"].mac

    def test_ttl_expiry_triggers_fresh_resolution(self):
        seg = build_segment([endpoint(1), endpoint(2)], arp_ttl_ticks=50)
        seg.run([tcp_entry(0, "h1", "10.0.0.2")], 10)
        assert seg.hosts["h1"].cache_lookup("10.0.0.2", 10) is not None
        assert seg.hosts["h1"].cache_lookup("10.0.0.2", 60) is None
        seg.run([tcp_entry(100, "h1", "10.0.0.2")], 110)
        # a second ARP request went out after expiry
        requests = [u for u, f in seg.log.frames.items() if f.is_arp]
        assert len([u for u in requests if seg.log.frames[u].src_host == "h1"]) == 2

    def test_restore_returns_cache_to_truth(self):
        seg = four_hosts_and_sensor()
        sensor_mac = seg.hosts["sensor"].mac
        plan = plan_redirect(
            {"10.0.0.1", "10.0.0.2"}, seg.truth, sensor_mac, "10.0.0.99"
        )
        apply_arp(seg, poison_frames(plan), t=0)
        apply_arp(seg, [f for _, f in restore_frames(plan, seg.truth)], t=1)
        h1 = seg.hosts["h1"]
        assert h1.cache_lookup("10.0.0.2", 2) == seg.truth["10.0.0.2"]


def redirect_script(seg: Segment, targets, data_entries):
    plan = plan_redirect(targets, seg.truth, seg.hosts["sensor"].mac, "10.0.0.99")
    poisons = [
        ScriptEntry(t=0, src_host="sensor", frame=f) for f in poison_frames(plan)
    ]
    return plan, poisons + data_entries


def pair_traffic(start_tick, step=3, repeats=2):
    entries = []
    t = start_tick
    for _ in range(repeats):
        for i, j in itertools.permutations(range(1, 5), 2):
            entries.append(tcp_entry(t, f"h{i}", f"10.0.0.{j}"))
            t += step
    return entries, t


class TestCoverage:
    def test_full_redirect_is_total(self):
        seg = four_hosts_and_sensor()
        data, end = pair_traffic(start_tick=1)
        _, script = redirect_script(seg, set(f"10.0.0.{i}" for i in range(1, 5)), data)
        seg.run(script, end + 10)
        assert coverage(seg.log, "sensor", all_ordered_pairs()) == 1.0

    def test_no_redirect_is_zero(self):
        seg = four_hosts_and_sensor()
        data, end = pair_traffic(start_tick=1)
        seg.run(data, end + 10)
        assert coverage(seg.log, "sensor", all_ordered_pairs()) == 0.0

    def test_sensor_sees_nothing_without_redirect_or_mirror(self):
        seg = four_hosts_and_sensor()
        data, end = pair_traffic(start_tick=1)
        seg.run(data, end + 10)
        assert all(pkt.is_arp for _, pkt in seg.observed["sensor"])

    def test_mirror_coverage_reflects_drops(self):
        seg = build_segment(
            [endpoint(i) for i in range(1, 5)] + [sensor_spec()],
            mirror=MirrorSpec(port=9, capacity_frames_per_tick=1),
        )
        warm, end = pair_traffic(start_tick=0, step=5, repeats=1)
        burst = [tcp_entry(end + 50, "h1", "10.0.0.2", dport=80 + i) for i in range(4)]
        seg.run(warm + burst, end + 60)
        cov = coverage(seg.log, "sensor", all_ordered_pairs())
        assert 0.0 < cov < 1.0

    def test_tap_covers_only_one_ports_pairs(self):
        seg = build_segment(
            [endpoint(i) for i in range(1, 5)] + [sensor_spec()],
            tap=TapSpec(observed_port=1, sensor_host_id="sensor"),
        )
        data, end = pair_traffic(start_tick=1)
        seg.run(data, end + 10)
        cov = coverage(seg.log, "sensor", all_ordered_pairs())
        assert cov == pytest.approx(6 / 12)  # pairs touching h1 only

    def test_forwarded_frames_reach_true_destination(self):
        seg = four_hosts_and_sensor()
        data = [tcp_entry(1, "h1", "10.0.0.2")]
        _, script = redirect_script(seg, {"10.0.0.1", "10.0.0.2"}, data)
        seg.run(script, 20)
        # the sensor's rewrite got delivered to h2's port
        rewrites = [
            u for u, f in seg.log.frames.items()
            if f.src_host == "sensor" and f.is_ipv4
        ]
        assert len(rewrites) == 1
        events = [
            e for e in seg.log.events if e.uid == rewrites[0] and e.event == DELIVERED
        ]
        assert any("host=h2" in e.detail for e in events)

    def test_rewritten_frame_never_rewritten_again(self):
        seg = four_hosts_and_sensor()
        data = [tcp_entry(1, "h1", "10.0.0.2")]
        _, script = redirect_script(seg, {"10.0.0.1", "10.0.0.2"}, data)
        seg.run(script, 20)
        ipv4_frames = [f for f in seg.log.frames.values() if f.is_ipv4]
        assert len(ipv4_frames) == 2  # original + one rewrite, no loop


class TestTeardown:
    def test_restore_then_ttl_returns_to_zero(self):
        seg = build_segment(
            [endpoint(i) for i in range(1, 5)] + [sensor_spec()],
            arp_ttl_ticks=2000,
        )
        targets = {f"10.0.0.{i}" for i in range(1, 5)}
        plan = plan_redirect(targets, seg.truth, seg.hosts["sensor"].mac, "10.0.0.99")
        poisons = [ScriptEntry(t=0, src_host="sensor", frame=f)
                   for f in poison_frames(plan)]
        data1, _ = pair_traffic(start_tick=1, step=1, repeats=1)
        restores = [
            ScriptEntry(t=100 + int(dt * 1000), src_host="sensor", frame=f)
            for dt, f in restore_frames(plan, seg.truth)
        ]
        data2, end2 = pair_traffic(start_tick=3200, step=1, repeats=1)
        seg.run(poisons + data1 + restores + data2, end2 + 10)
        pairs = all_ordered_pairs()
        assert coverage(seg.log, "sensor", pairs, from_tick=0, to_tick=50) == 1.0
        assert coverage(seg.log, "sensor", pairs, from_tick=3150) == 0.0
        # caches hold only truth
        for i in range(1, 5):
            host = seg.hosts[f"h{i}"]
            for ip, (mac, _exp) in host.arp_cache.items():
                assert mac == seg.truth[ip]


class TestDeterminism:
    def build_and_run(self):
        seg = four_hosts_and_sensor(seed=42)
        data, end = pair_traffic(start_tick=1)
        _, script = redirect_script(seg, set(f"10.0.0.{i}" for i in range(1, 5)), data)
        seg.run(script, end + 10)
        return seg

    def test_identical_runs_identical_logs(self):
        a, b = self.build_and_run(), self.build_and_run()
        assert a.log.serialize() == b.log.serialize()
        assert a.digest() == b.digest()

    def test_conservation(self):
        seg = self.build_and_run()
        counts = conservation_counts(seg.log)
        assert counts["injected"] == (
            counts["delivered"] + counts["consumed"] + counts["dropped"]
        )
