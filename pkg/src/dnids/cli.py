"""Operator entry point: daemons, simulations, replay, planning, queries.

Exit codes are a stable scripting contract: 0 success, 1 runtime failure,
2 usage or configuration error. The DNIDS_TOKEN environment variable
overrides any token found in a config file.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from pathlib import Path

from . import idmef
from .head import DEFAULT_PORT, HeadServer
from .packet import FlowKey, MacAddr
from .redirect import plan_redirect
from .scenario import ScenarioError, load_scenario, run_scenario
from .sensor import (
    PcapSource,
    RedirectSettings,
    SensorConfig,
    SimCaptureSource,
    parse_rule,
    run_sensor,
)
from .scenario import script_entries, Scenario
from .sim import build_segment
from .solver import ANALYZERS, ArpSpoofAnalyzer, PortScanAnalyzer, SolverConfig, run_solver
from .store import AlertStore, StoreError, TrafficStore
from .transport import SystemClock, connect_tcp, parse_address

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class ConfigError(Exception):
    pass


def _load_ini(path: str, section: str) -> configparser.SectionProxy:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if section not in parser:
        raise ConfigError(f"config file {path} has no [{section}] section")
    return parser[section]


def _token_from(section, args_token: str | None = None) -> str:
    env = os.environ.get("DNIDS_TOKEN")
    if env:
        return env
    if args_token:
        return args_token
    token = section.get("token", "") if section is not None else ""
    if not token:
        raise ConfigError("no token: set one in the config or DNIDS_TOKEN")
    return token


def _parse_flow(text: str) -> FlowKey:
    # proto:ip:port:ip:port, canonicalized like any captured packet
    parts = text.split(":")
    if len(parts) != 5:
        raise ConfigError("flow filter needs proto:ip:port:ip:port")
    proto = int(parts[0])
    a = (parts[1], int(parts[2]))
    b = (parts[3], int(parts[4]))
    import socket

    ka = (socket.inet_aton(a[0]), a[1])
    kb = (socket.inet_aton(b[0]), b[1])
    lo, hi = (a, b) if ka <= kb else (b, a)
    return FlowKey(proto=proto, lo=lo, hi=hi)


def cmd_sim_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    if args.seed is not None:
        scenario.seed = args.seed
    try:
        result = run_scenario(scenario, args.out)
    except Exception as exc:
        print(f"scenario failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    sys.stdout.write(result.coverage_table())
    print(f"outputs written to {args.out}")
    return 0


def cmd_head(args) -> int:
    try:
        section = _load_ini(args.config, "head")
        token = _token_from(section)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    host, port = parse_address(section.get("listen", f"127.0.0.1:{DEFAULT_PORT}"), DEFAULT_PORT)
    store_dir = section.get("store_dir", "./dnids-store")
    head = HeadServer(
        store_dir,
        token=token,
        dedup=section.getboolean("dedup", fallback=False),
        heartbeat_s=section.getfloat("heartbeat_s", fallback=10.0),
    )
    head.serve_tcp(host, port)
    print(f"head-server listening on {host}:{port}, store at {store_dir}")
    try:
        while True:
            time.sleep(1.0)
            head.check_liveness()
    except KeyboardInterrupt:
        pass
    finally:
        head.close()
    return 0


def _sensor_source(args, config_redirect):
    if args.pcap:
        return PcapSource(Path(args.pcap).read_bytes())
    if args.sim:
        ref, _, host_id = args.sim.rpartition(":")
        if not ref or not host_id:
            raise ConfigError("--sim needs <scenario>:<host_id>")
        scenario = load_scenario(ref)
        segment = build_segment(
            scenario.hosts,
            seed=scenario.seed,
            arp_ttl_ticks=scenario.arp_ttl_ticks,
            fdb_ttl_ticks=scenario.fdb_ttl_ticks,
        )
        return SimCaptureSource(
            segment, host_id, script_entries(scenario), until=scenario.until
        )
    raise ConfigError("a capture source is required: --pcap or --sim")


def cmd_sensor(args) -> int:
    try:
        section = _load_ini(args.config, "sensor")
        token = _token_from(section)
        redirect = None
        targets = section.get("redirect_targets", "").split()
        if targets:
            redirect = RedirectSettings(
                targets=tuple(targets),
                repoison_interval_s=section.getfloat("repoison_interval_s", fallback=20.0),
                start_delay_s=section.getfloat("start_delay_s", fallback=0.0),
            )
        rules = tuple(
            parse_rule(rule)
            for rule in section.get("filter", "").split(";")
            if rule.strip()
        )
        config = SensorConfig(
            node_id=section.get("node_id", "sensor-1"),
            token=token,
            channels=section.getint("channels", fallback=1),
            filter_rules=rules,
            redirect=redirect,
            heartbeat_s=section.getfloat("heartbeat_s", fallback=10.0),
        )
        source = _sensor_source(args, redirect)
        head_addr = section.get("head", f"127.0.0.1:{DEFAULT_PORT}")
    except (ConfigError, ScenarioError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    host, port = parse_address(head_addr, DEFAULT_PORT)
    try:
        report = run_sensor(config, source, lambda: connect_tcp(host, port), SystemClock())
    except KeyboardInterrupt:
        return 0
    except Exception as exc:
        print(f"sensor failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    print(
        f"captured={report.captured} matched={report.matched} "
        f"batches={report.sent_batches} acked={report.acked_batches} "
        f"reconnects={report.reconnects}"
    )
    return 0


def cmd_solver(args) -> int:
    try:
        section = _load_ini(args.config, "solver")
        token = _token_from(section)
        names = section.get("analyzers", "portscan arpspoof").split()
        analyzers = []
        parser = configparser.ConfigParser()
        parser.read(args.config)
        for name in names:
            if name not in ANALYZERS:
                raise ConfigError(f"unknown analyzer {name!r}")
            if name == "portscan" and "portscan" in parser:
                ps = parser["portscan"]
                analyzers.append(
                    PortScanAnalyzer(
                        threshold=ps.getint("threshold", fallback=15),
                        window_s=ps.getfloat("window_s", fallback=5.0),
                        cooldown_s=ps.getfloat("cooldown_s", fallback=60.0),
                    )
                )
            else:
                analyzers.append(ANALYZERS[name]())
        subscription = tuple(
            rule.strip()
            for rule in section.get("subscription", "accept-all").split(";")
            if rule.strip()
        )
        config = SolverConfig(
            solver_id=section.get("solver_id", "solver-1"),
            token=token,
            group=section.get("group", "analysis"),
            subscription=subscription,
            heartbeat_s=section.getfloat("heartbeat_s", fallback=10.0),
            seed=section.getint("seed", fallback=0),
        )
        head_addr = section.get("head", f"127.0.0.1:{DEFAULT_PORT}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    host, port = parse_address(head_addr, DEFAULT_PORT)
    try:
        report = run_solver(
            config, analyzers, lambda: connect_tcp(host, port), SystemClock()
        )
    except KeyboardInterrupt:
        return 0
    except Exception as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    print(
        f"records={report.records_seen} alerts={report.alerts_sent} "
        f"acked={report.alerts_acked} rejected={report.alerts_rejected}"
    )
    return 0


def cmd_replay(args) -> int:
    try:
        data = Path(args.pcap).read_bytes()
        token = _token_from(None, args.token)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    host, port = parse_address(args.head, DEFAULT_PORT)
    config = SensorConfig(node_id=args.node_id, token=token, channels=args.channels)
    try:
        report = run_sensor(
            config, PcapSource(data), lambda: connect_tcp(host, port), SystemClock()
        )
    except Exception as exc:
        print(f"replay failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    print(f"replayed={report.captured} batches={report.sent_batches} acked={report.acked_batches}")
    return 0


def cmd_redirect_plan(args) -> int:
    try:
        truth = {}
        for line in Path(args.truth).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            ip, mac = line.split()
            truth[ip] = MacAddr.parse(mac)
        sensor_mac = MacAddr.parse(args.sensor_mac)
        plan = plan_redirect(
            set(args.targets.split(",")), truth, sensor_mac, args.sensor_ip
        )
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    for d in plan.directives:
        print(f"{d.victim_ip} {d.victim_mac} {d.impersonated_ip} {plan.sensor_mac}")
    return 0


def cmd_traffic_query(args) -> int:
    try:
        store = TrafficStore(Path(args.store) / "traffic")
        flow = _parse_flow(args.flow) if args.flow else None
        records = store.query(args.start, args.end, flow_filter=flow, limit=args.limit)
    except (StoreError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    print("record_id\tsensor\tts\tflow\torig_len\tcap_len")
    for r in records:
        ts = r.ts_sec + r.ts_usec / 1e6
        flow_text = "-"
        if r.flow_key is not None:
            k = r.flow_key
            flow_text = f"{k.proto}:{k.lo[0]}:{k.lo[1]}:{k.hi[0]}:{k.hi[1]}"
        print(f"{r.record_id}\t{r.sensor_id}\t{ts:.6f}\t{flow_text}\t{r.orig_len}\t{len(r.raw)}")
    return 0


def cmd_alerts_query(args) -> int:
    try:
        store = AlertStore(Path(args.store) / "alerts")
        time_range = None
        if args.since is not None or args.until is not None:
            time_range = (
                args.since if args.since is not None else 0.0,
                args.until if args.until is not None else float("inf"),
            )
        rows = store.query(
            classification_text=args.classification,
            analyzer_id=args.analyzer,
            time_range=time_range,
            limit=args.limit,
        )
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    print("alert_id\treceived\tsolver\tanalyzer\tclassification\tseverity\tduplicate")
    for r in rows:
        print(
            f"{r.alert_id}\t{r.received_time:.3f}\t{r.solver_id}\t{r.analyzer_id}"
            f"\t{r.classification_text}\t{r.severity or '-'}\t{str(r.duplicate).lower()}"
        )
    return 0


def cmd_idmef_validate(args) -> int:
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        message = idmef.parse_xml(data)
    except idmef.IdmefError as exc:
        print(f"invalid: {exc}")
        return 1
    if isinstance(message, idmef.IdmefAlert):
        violations = idmef.validate(message)
        if violations:
            for violation in violations:
                print(f"violation: {violation}")
            return 1
    print("valid")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dnids",
        description="Distributed NIDS at desk scale: sensors, head-server, solvers, simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim-run", help="run a scenario and write its outputs")
    p.add_argument("--scenario", required=True, help="bundled name or file path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_sim_run)

    p = sub.add_parser("head", help="run the head-server daemon")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_head)

    p = sub.add_parser("sensor", help="run a sensor against a capture source")
    p.add_argument("--config", required=True)
    p.add_argument("--pcap", help="replay a capture file")
    p.add_argument("--sim", help="<scenario>:<host_id> simulated attachment")
    p.set_defaults(func=cmd_sensor)

    p = sub.add_parser("solver", help="run a solver daemon")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_solver)

    p = sub.add_parser("replay", help="one-shot pcap replay to a head-server")
    p.add_argument("--pcap", required=True)
    p.add_argument("--head", required=True, help="host:port")
    p.add_argument("--token", default=None)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--node-id", default="replay-sensor")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("redirect-plan", help="print the poison directive list")
    p.add_argument("--targets", required=True, help="comma-separated target IPs")
    p.add_argument("--truth", required=True, help="file of 'ip mac' lines")
    p.add_argument("--sensor-mac", required=True)
    p.add_argument("--sensor-ip", required=True)
    p.set_defaults(func=cmd_redirect_plan)

    p = sub.add_parser("traffic-query", help="query a traffic store directory")
    p.add_argument("--store", required=True, help="head store directory")
    p.add_argument("--start", type=float, default=0.0)
    p.add_argument("--end", type=float, default=float("inf"))
    p.add_argument("--flow", default=None, help="proto:ip:port:ip:port")
    p.add_argument("--limit", type=int, default=1000)
    p.set_defaults(func=cmd_traffic_query)

    p = sub.add_parser("alerts-query", help="query an alert store directory")
    p.add_argument("--store", required=True)
    p.add_argument("--classification", default=None)
    p.add_argument("--analyzer", default=None)
    p.add_argument("--since", type=float, default=None)
    p.add_argument("--until", type=float, default=None)
    p.add_argument("--limit", type=int, default=1000)
    p.set_defaults(func=cmd_alerts_query)

    p = sub.add_parser("idmef-validate", help="validate an IDMEF XML file")
    p.add_argument("file")
    p.set_defaults(func=cmd_idmef_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
