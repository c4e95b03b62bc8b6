"""Scenario files: declarative segment + traffic + capture-strategy runs.

A scenario is line-oriented text with bracketed sections. [hosts] and
[script] hold whitespace-separated rows; everything else is key = value.
Each [strategy <name>] section describes one way of attaching the sensor
(redirect, mirror, tap, or none) and gets its own simulation run over the
same traffic script, so the capture strategies are directly comparable in
one coverage table. An optional [pipeline] section wires the sensor's
capture through a real head-server and solver in-process.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import sim as simmod
from .head import HeadServer
from .packet import MacAddr, PROTO_TCP, PROTO_UDP, TCP_FLAG_SYN, write_pcap
from .redirect import plan_redirect, poison_schedule, restore_frames
from .sensor import RedirectSettings, SensorConfig, SimCaptureSource, run_sensor
from .sim import (
    DeliveryLog,
    FrameTemplate,
    HostSpec,
    MirrorSpec,
    ScriptEntry,
    Segment,
    TapSpec,
    TICKS_PER_SECOND,
    build_segment,
    coverage,
)
from .solver import ANALYZERS, SolverClient, SolverConfig
from .transport import ManualClock

logger = logging.getLogger(__name__)

BUNDLED_DIR = Path(__file__).parent / "scenarios"
PIPELINE_TOKEN = "scenario-token"


class ScenarioError(Exception):
    pass


@dataclass
class StrategySpec:
    name: str
    mode: str  # redirect | mirror | tap | none
    targets: tuple[str, ...] = ()
    repoison_interval_s: float = 20.0
    start_delay_s: float = 0.0
    restore_at_tick: int | None = None
    mirror_capacity: int = 50
    observed_port: int | None = None


@dataclass
class MeasureWindow:
    name: str
    from_tick: int
    to_tick: int | None


@dataclass
class PipelineSpec:
    enabled: bool = False
    analyzers: tuple[str, ...] = ("portscan",)
    group: str = "analysis"
    subscription: tuple[str, ...] = ("accept-all",)
    sensor_channels: int = 1
    seed: int = 0


@dataclass
class Scenario:
    name: str
    seed: int = 0
    until: int = 1000
    arp_ttl_ticks: int = simmod.DEFAULT_ARP_TTL_TICKS
    fdb_ttl_ticks: int = simmod.DEFAULT_FDB_TTL_TICKS
    hosts: list[HostSpec] = field(default_factory=list)
    strategies: list[StrategySpec] = field(default_factory=list)
    script_rows: list[tuple] = field(default_factory=list)
    windows: list[MeasureWindow] = field(default_factory=list)
    pipeline: PipelineSpec = field(default_factory=PipelineSpec)

    def sensor_host(self) -> HostSpec:
        sensors = [h for h in self.hosts if h.role == "sensor"]
        if len(sensors) != 1:
            raise ScenarioError("scenario needs exactly one sensor host")
        return sensors[0]

    def endpoint_pairs(self) -> set[tuple[str, str]]:
        ips = [h.ip for h in self.hosts if h.role == "endpoint"]
        return {(a, b) for a in ips for b in ips if a != b}


def _parse_bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def _parse_proto(text: str) -> int:
    lowered = text.lower()
    if lowered == "tcp":
        return PROTO_TCP
    if lowered == "udp":
        return PROTO_UDP
    return int(text)


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    scenario = Scenario(name=name)
    section = None
    strategy: StrategySpec | None = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            header = line[1:-1].strip()
            if header.startswith("strategy"):
                _, _, strat_name = header.partition(" ")
                if not strat_name:
                    raise ScenarioError(f"line {lineno}: strategy needs a name")
                strategy = StrategySpec(name=strat_name.strip(), mode="none")
                scenario.strategies.append(strategy)
                section = "strategy"
            else:
                section = header
                strategy = None
            continue
        try:
            _parse_line(scenario, section, strategy, line)
        except (ValueError, KeyError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from exc
    if not scenario.hosts:
        raise ScenarioError("no [hosts] section")
    if not scenario.strategies:
        scenario.strategies.append(StrategySpec(name="none", mode="none"))
    if not scenario.windows:
        scenario.windows.append(MeasureWindow("all", 0, None))
    return scenario


def _parse_line(scenario, section, strategy, line) -> None:
    if section == "segment":
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "seed":
            scenario.seed = int(value)
        elif key == "until":
            scenario.until = int(value)
        elif key == "arp_ttl_ticks":
            scenario.arp_ttl_ticks = int(value)
        elif key == "fdb_ttl_ticks":
            scenario.fdb_ttl_ticks = int(value)
        else:
            raise ValueError(f"unknown segment key {key!r}")
    elif section == "hosts":
        parts = line.split()
        if len(parts) not in (4, 5):
            raise ValueError("host row needs: id ip mac port [role]")
        host_id, ip, mac, port = parts[:4]
        role = parts[4] if len(parts) == 5 else "endpoint"
        scenario.hosts.append(
            HostSpec(host_id=host_id, ip=ip, mac=MacAddr.parse(mac),
                     port=int(port), role=role)
        )
    elif section == "strategy":
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "mode":
            if value not in ("redirect", "mirror", "tap", "none"):
                raise ValueError(f"unknown strategy mode {value!r}")
            strategy.mode = value
        elif key == "targets":
            strategy.targets = tuple(value.split())
        elif key == "repoison_interval_s":
            strategy.repoison_interval_s = float(value)
        elif key == "start_delay_s":
            strategy.start_delay_s = float(value)
        elif key == "restore_at_tick":
            strategy.restore_at_tick = int(value)
        elif key == "capacity":
            strategy.mirror_capacity = int(value)
        elif key == "observed_port":
            strategy.observed_port = int(value)
        else:
            raise ValueError(f"unknown strategy key {key!r}")
    elif section == "script":
        # t src dst_ip proto sport dport payload_len flags [count] [every] [burst]
        parts = line.split()
        if len(parts) < 8:
            raise ValueError(
                "script row needs: t src dst proto sport dport len flags [count every burst]"
            )
        t = int(parts[0])
        src = parts[1]
        dst_ip = parts[2]
        proto = _parse_proto(parts[3])
        sport, dport, payload_len = int(parts[4]), int(parts[5]), int(parts[6])
        flags = TCP_FLAG_SYN if parts[7].lower() == "syn" else 0
        count = int(parts[8]) if len(parts) > 8 else 1
        every = int(parts[9]) if len(parts) > 9 else 1
        burst = int(parts[10]) if len(parts) > 10 else 1
        scenario.script_rows.append(
            (t, src, dst_ip, proto, sport, dport, payload_len, flags, count, every, burst)
        )
    elif section == "measure":
        parts = line.split()
        if len(parts) != 3:
            raise ValueError("measure row needs: name from_tick to_tick|end")
        to_tick = None if parts[2] == "end" else int(parts[2])
        scenario.windows.append(MeasureWindow(parts[0], int(parts[1]), to_tick))
    elif section == "pipeline":
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        pipeline = scenario.pipeline
        if key == "enabled":
            pipeline.enabled = _parse_bool(value)
        elif key == "analyzers":
            pipeline.analyzers = tuple(value.split())
        elif key == "group":
            pipeline.group = value
        elif key == "subscription":
            pipeline.subscription = tuple(r.strip() for r in value.split(";") if r.strip())
        elif key == "sensor_channels":
            pipeline.sensor_channels = int(value)
        elif key == "seed":
            pipeline.seed = int(value)
        else:
            raise ValueError(f"unknown pipeline key {key!r}")
    else:
        raise ValueError(f"line outside a known section: {line!r}")


def load_scenario(ref: str | Path) -> Scenario:
    """Resolve a bundled scenario name or a filesystem path."""
    path = Path(ref)
    if not path.exists():
        bundled = BUNDLED_DIR / f"{ref}.scn"
        if bundled.exists():
            path = bundled
        else:
            raise ScenarioError(f"scenario not found: {ref}")
    return parse_scenario(path.read_text(), name=path.stem)


def script_entries(scenario: Scenario) -> list[ScriptEntry]:
    entries: list[ScriptEntry] = []
    for t, src, dst_ip, proto, sport, dport, length, flags, count, every, burst in (
        scenario.script_rows
    ):
        for rep in range(count):
            for _ in range(burst):
                entries.append(
                    ScriptEntry(
                        t=t + rep * every,
                        src_host=src,
                        template=FrameTemplate(
                            dst_ip=dst_ip, proto=proto, src_port=sport,
                            dst_port=dport, payload_len=length, tcp_flags=flags,
                        ),
                    )
                )
    return entries


def _build_for_strategy(scenario: Scenario, strategy: StrategySpec) -> Segment:
    sensor = scenario.sensor_host()
    mirror = None
    tap = None
    if strategy.mode == "mirror":
        mirror = MirrorSpec(
            port=sensor.port, capacity_frames_per_tick=strategy.mirror_capacity
        )
    elif strategy.mode == "tap":
        if strategy.observed_port is None:
            raise ScenarioError(f"strategy {strategy.name}: tap needs observed_port")
        tap = TapSpec(observed_port=strategy.observed_port, sensor_host_id=sensor.host_id)
    return build_segment(
        scenario.hosts,
        seed=scenario.seed,
        arp_ttl_ticks=scenario.arp_ttl_ticks,
        fdb_ttl_ticks=scenario.fdb_ttl_ticks,
        mirror=mirror,
        tap=tap,
    )


def _inline_redirect_entries(
    segment: Segment, scenario: Scenario, strategy: StrategySpec
) -> list[ScriptEntry]:
    """Poison/restore script entries for runs without the sensor daemon."""
    sensor = scenario.sensor_host()
    plan = plan_redirect(
        set(strategy.targets) or {h.ip for h in scenario.hosts if h.role == "endpoint"},
        segment.truth,
        sensor.mac,
        sensor.ip,
        repoison_interval_s=strategy.repoison_interval_s,
    )
    start = int(strategy.start_delay_s * TICKS_PER_SECOND)
    horizon_ticks = (
        strategy.restore_at_tick if strategy.restore_at_tick is not None else scenario.until
    )
    horizon_s = max(0.0, (horizon_ticks - start) / TICKS_PER_SECOND)
    entries = []
    for t_s, frames in poison_schedule(plan, horizon_s):
        tick = start + int(t_s * TICKS_PER_SECOND)
        entries.extend(
            ScriptEntry(t=tick, src_host=sensor.host_id, frame=f) for f in frames
        )
    if strategy.restore_at_tick is not None:
        for dt_s, frame in restore_frames(plan, segment.truth):
            tick = strategy.restore_at_tick + int(dt_s * TICKS_PER_SECOND)
            entries.append(ScriptEntry(t=tick, src_host=sensor.host_id, frame=frame))
    return entries


@dataclass
class StrategyResult:
    name: str
    segment: Segment
    log: DeliveryLog
    coverages: dict[str, float]  # window name -> coverage
    alerts: list = field(default_factory=list)
    store_dir: Path | None = None


@dataclass
class ScenarioResult:
    scenario: Scenario
    results: list[StrategyResult]

    def coverage_table(self) -> str:
        lines = ["strategy\twindow\tinterpair\tseen\tcoverage\tmirror_copies\tmirror_drops"]
        for result in self.results:
            copies = sum(1 for e in result.log.events if e.event == simmod.MIRRORED)
            drops = sum(1 for e in result.log.events if e.event == simmod.MIRROR_DROPPED)
            for window in self.scenario.windows:
                interpair, seen = _coverage_parts(
                    result.log, self.scenario, window
                )
                cov = result.coverages[window.name]
                lines.append(
                    f"{result.name}\t{window.name}\t{interpair}\t{seen}"
                    f"\t{cov:.3f}\t{copies}\t{drops}"
                )
        return "\n".join(lines) + "\n"

    def caches_table(self) -> str:
        lines = ["strategy\thost\tip\tmac\ttruthful"]
        for result in self.results:
            for host_id in sorted(result.segment.hosts):
                host = result.segment.hosts[host_id]
                for ip in sorted(host.arp_cache):
                    mac, _exp = host.arp_cache[ip]
                    truthful = result.segment.truth.get(ip) == mac
                    lines.append(
                        f"{result.name}\t{host_id}\t{ip}\t{mac}\t{str(truthful).lower()}"
                    )
        return "\n".join(lines) + "\n"


def _coverage_parts(log, scenario, window):
    sensor_id = scenario.sensor_host().host_id
    pairs = scenario.endpoint_pairs()
    interpair = set()
    for event in log.events:
        if event.event != simmod.INJECTED:
            continue
        if event.tick < window.from_tick:
            continue
        if window.to_tick is not None and event.tick >= window.to_tick:
            continue
        info = log.frames[event.uid]
        if info.is_ipv4 and info.src_host != sensor_id and (info.src_ip, info.dst_ip) in pairs:
            interpair.add(event.uid)
    seen = set()
    for event in log.events:
        if event.event in (simmod.DELIVERED, simmod.MIRRORED):
            fields = dict(kv.split("=", 1) for kv in event.detail.split() if "=" in kv)
            if fields.get("host") == sensor_id:
                seen.add(event.uid)
    return len(interpair), len(interpair & seen)


def run_strategy(
    scenario: Scenario, strategy: StrategySpec, out_dir: Path | None = None
) -> StrategyResult:
    segment = _build_for_strategy(scenario, strategy)
    sensor = scenario.sensor_host()
    base_entries = script_entries(scenario)
    alerts = []
    store_dir = None
    if scenario.pipeline.enabled:
        if out_dir is None:
            raise ScenarioError("pipeline runs need an output directory")
        store_dir = out_dir / f"store-{strategy.name}"
        clock = ManualClock()
        head = HeadServer(store_dir, token=PIPELINE_TOKEN, clock=clock)
        analyzers = []
        for name in scenario.pipeline.analyzers:
            if name not in ANALYZERS:
                raise ScenarioError(f"unknown analyzer {name!r}")
            analyzers.append(ANALYZERS[name]())
        solver = SolverClient(
            SolverConfig(
                solver_id="solver-embedded",
                token=PIPELINE_TOKEN,
                group=scenario.pipeline.group,
                subscription=scenario.pipeline.subscription,
                seed=scenario.pipeline.seed,
            ),
            analyzers,
            head.local_connect,
            clock,
        )
        solver.connect_and_register()
        redirect = None
        entries = base_entries
        if strategy.mode == "redirect":
            redirect = RedirectSettings(
                targets=tuple(strategy.targets)
                or tuple(h.ip for h in scenario.hosts if h.role == "endpoint"),
                repoison_interval_s=strategy.repoison_interval_s,
                start_delay_s=strategy.start_delay_s,
            )
        source = SimCaptureSource(
            segment, sensor.host_id, entries, until=scenario.until
        )
        sensor_config = SensorConfig(
            node_id=sensor.host_id,
            token=PIPELINE_TOKEN,
            channels=scenario.pipeline.sensor_channels,
            redirect=redirect,
        )
        run_sensor(sensor_config, source, head.local_connect, clock)
        while solver.process_available():
            pass
        solver.bye()
        alerts = head.query_alerts(limit=100000)
        head.close()
    else:
        entries = list(base_entries)
        if strategy.mode == "redirect":
            entries += _inline_redirect_entries(segment, scenario, strategy)
        horizon = scenario.until
        for entry in entries:
            horizon = max(horizon, entry.t + 1)
        segment.run(entries, horizon)
    coverages = {}
    for window in scenario.windows:
        coverages[window.name] = coverage(
            segment.log,
            sensor.host_id,
            scenario.endpoint_pairs(),
            from_tick=window.from_tick,
            to_tick=window.to_tick,
        )
    return StrategyResult(
        name=strategy.name,
        segment=segment,
        log=segment.log,
        coverages=coverages,
        alerts=alerts,
        store_dir=store_dir,
    )


def run_scenario(scenario: Scenario, out_dir: str | Path) -> ScenarioResult:
    """Run every strategy and write logs, pcaps, and the coverage table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = [run_strategy(scenario, s, out_dir) for s in scenario.strategies]
    overall = ScenarioResult(scenario=scenario, results=results)
    sensor_id = scenario.sensor_host().host_id
    for result in results:
        (out_dir / f"delivery-{result.name}.log").write_bytes(result.log.serialize())
        observed = result.segment.observed.get(sensor_id, [])
        pcap = write_pcap(
            (
                tick // TICKS_PER_SECOND,
                (tick % TICKS_PER_SECOND) * 1000,
                pkt.raw,
            )
            for tick, pkt in observed
        )
        (out_dir / f"observed-{result.name}.pcap").write_bytes(pcap)
    (out_dir / "coverage.tsv").write_text(overall.coverage_table())
    (out_dir / "caches.tsv").write_text(overall.caches_table())
    return overall
