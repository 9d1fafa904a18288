"""``modlog`` command line.

Exit codes: 0 success, 1 domain failure (violations, failed read, unknown
host), 2 usage or environment failure (bad file, unopenable port).
Human-readable output goes to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import __version__
from .clock import SimClock, SystemClock, format_utc, parse_utc
from .drivers import ReadingStatus, UnknownSensorType, read_sensor, registry_lookup
from .inventory import (
    InventoryError,
    UnknownHost,
    load_inventory,
    plan_tasks,
    render_service_unit,
    service_name,
    validate_inventory,
)
from .logger import run_logging_service
from .logger.service import default_opener
from .modbus import (
    FunctionCode,
    ModbusError,
    ModbusException,
    RequestPdu,
    build_read_request,
    parse_response,
)
from .scenario import ScenarioError, load_scenario, scenario_opener
from .transport import (
    Parity,
    RetryPolicy,
    SerialConfig,
    Timeout,
    TransportError,
    VirtualEndpoint,
    open_endpoint,
)

log = logging.getLogger("modlog")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad invocation or environment: exit code 2."""


def _configure_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("MODLOG_LOG_LEVEL", "warn").lower(), logging.WARNING)
    root = logging.getLogger("modlog")
    root.setLevel(level)
    if not any(getattr(h, "_modlog", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handler._modlog = True
        root.addHandler(handler)


def _out(line: str = "") -> None:
    print(line, file=sys.stdout)


def _err(line: str) -> None:
    print(line, file=sys.stderr)


def _emit_json(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True), file=sys.stdout)


def _load_inventory(path: str):
    try:
        return load_inventory(path)
    except OSError as exc:
        raise UsageError(f"cannot read inventory {path}: {exc.strerror or exc}") from exc
    except InventoryError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _pick_host(inv, requested: Optional[str]) -> str:
    if requested:
        return requested
    if len(inv.hosts) == 1:
        return inv.hosts[0].hostname
    return socket.gethostname().lower()


def _serial_from_args(args, defaults: SerialConfig, port: str) -> SerialConfig:
    try:
        return SerialConfig(
            port=port,
            baud=args.baud if args.baud is not None else defaults.baud,
            parity=Parity.parse(args.parity) if args.parity else defaults.parity,
            stop_bits=args.stop_bits if args.stop_bits is not None else defaults.stop_bits,
            byte_size=args.byte_size if args.byte_size is not None else defaults.byte_size,
        )
    except ValueError as exc:
        raise UsageError(f"invalid serial settings: {exc}") from exc


def _open(args, serial_defaults: SerialConfig):
    """Open the port named by --port, or the scenario bus; return (endpoint, clock)."""
    if args.scenario:
        try:
            scenario = load_scenario(args.scenario)
        except OSError as exc:
            raise UsageError(f"cannot read scenario {args.scenario}: {exc.strerror or exc}") from exc
        except ScenarioError as exc:
            raise UsageError(f"{args.scenario}: {exc}") from exc
        clock = SimClock(scenario.start or 0.0)
        buses = scenario.build(clock)
        port = args.port
        if port is None:
            if len(buses) != 1:
                raise UsageError("scenario has several buses; choose one with --port")
            port = next(iter(buses))
        if port not in buses:
            raise UsageError(f"port {port} is not part of the scenario")
        config = _serial_from_args(args, serial_defaults, port)
        return VirtualEndpoint(config, buses[port], clock), clock
    if not args.port:
        raise UsageError("either --port or --scenario is required")
    config = _serial_from_args(args, serial_defaults, args.port)
    clock = SystemClock()
    try:
        return open_endpoint(config, None, clock), clock
    except TransportError as exc:
        raise UsageError(str(exc)) from exc


# -- validate --------------------------------------------------------------

def cmd_validate(args) -> int:
    inv = _load_inventory(args.inventory)
    violations = validate_inventory(inv)
    if args.json:
        _emit_json({
            "command": "validate",
            "ok": not violations,
            "hosts": len(inv.hosts),
            "sensors": inv.sensor_count,
            "violations": [{"kind": v.kind, "path": v.path, "message": v.message}
                           for v in violations],
        })
    else:
        for v in violations:
            _out(str(v))
        if not violations:
            _out(f"OK: {len(inv.hosts)} host{'s' if len(inv.hosts) != 1 else ''}, "
                 f"{inv.sensor_count} sensor{'s' if inv.sensor_count != 1 else ''}")
    return 1 if violations else 0


# -- scan ------------------------------------------------------------------

def _parse_range(text: str):
    try:
        lo, hi = (int(x, 0) for x in text.split("-", 1))
    except ValueError:
        raise UsageError(f"invalid --range {text!r}; expected e.g. 1-32") from None
    if not 1 <= lo <= hi <= 247:
        raise UsageError(f"--range {text!r} must lie within 1-247")
    return lo, hi


def cmd_scan(args) -> int:
    lo, hi = (1, 247) if args.full else _parse_range(args.range)
    endpoint, _ = _open(args, SerialConfig())
    policy = RetryPolicy(attempts=1, timeout_ms=args.timeout_ms)
    function = FunctionCode.parse(args.function)
    found: List[int] = []
    try:
        for address in range(lo, hi + 1):
            pdu = RequestPdu(address, function, args.register, 1)
            try:
                reply = endpoint.transact(build_read_request(pdu), policy)
                parse_response(reply, pdu)
            except ModbusException:
                pass  # an exception reply still proves someone is there
            except (Timeout, ModbusError):
                continue
            except TransportError as exc:
                raise UsageError(str(exc)) from exc
            found.append(address)
    finally:
        endpoint.close()
    if args.json:
        _emit_json({"command": "scan", "port": endpoint.config.port, "range": [lo, hi],
                    "responding": found})
    else:
        for address in found:
            _out(str(address))
        _err(f"scanned {lo}-{hi} on {endpoint.config.port}: {len(found)} responding")
    return 0


# -- read ------------------------------------------------------------------

def cmd_read(args) -> int:
    try:
        descriptor = registry_lookup(args.sensor_type)
    except UnknownSensorType as exc:
        raise UsageError(str(exc)) from exc
    endpoint, clock = _open(args, descriptor.default_serial)
    try:
        policy = RetryPolicy(attempts=args.attempts, timeout_ms=args.timeout_ms)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        reading = read_sensor(descriptor, endpoint, args.slave, policy, clock,
                              descriptor.sensor_type)
    finally:
        endpoint.close()
    if args.json:
        _emit_json({
            "command": "read",
            "sensor_type": descriptor.sensor_type,
            "port": endpoint.config.port,
            "slave": args.slave,
            "timestamp": format_utc(reading.timestamp, "ms"),
            "status": reading.status.value,
            "values": {k: {"value": v, "unit": u} for k, (v, u) in reading.values.items()},
            "error": reading.error_detail,
        })
    else:
        for name in descriptor.measurement_names:
            if name in reading.values:
                value, unit = reading.values[name]
                _out(f"{name} {value!r} {unit}")
        detail = f": {reading.error_detail}" if reading.error_detail else ""
        _out(f"status {reading.status.value}{detail}")
    return 0 if reading.status is ReadingStatus.OK else 1


# -- run -------------------------------------------------------------------

def cmd_run(args) -> int:
    inv = _load_inventory(args.inventory)
    hostname = _pick_host(inv, args.host)
    try:
        inv.host(hostname)
    except UnknownHost as exc:
        _err(f"error: {exc}")
        return 1
    violations = validate_inventory(inv)
    if violations:
        for v in violations:
            _out(str(v))
        return 1
    tasks = plan_tasks(inv, hostname)
    if args.output_dir:
        tasks = [replace(t, output_dir=Path(args.output_dir)) for t in tasks]

    if args.scenario:
        if args.duration is None:
            raise UsageError("--scenario runs on simulated time and needs --duration")
        try:
            scenario = load_scenario(args.scenario)
        except OSError as exc:
            raise UsageError(f"cannot read scenario {args.scenario}: {exc.strerror or exc}") from exc
        except ScenarioError as exc:
            raise UsageError(f"{args.scenario}: {exc}") from exc
        try:
            start = parse_utc(args.sim_start) if args.sim_start else scenario.start
        except ValueError as exc:
            raise UsageError(f"invalid --sim-start: {exc}") from exc
        clock = SimClock(start if start is not None else SystemClock().now())
        opener = scenario_opener(scenario.build(clock))
        mode = "virtual"
    else:
        clock = SystemClock()
        opener = default_opener
        mode = "serial"

    stop = threading.Event()
    previous = {}
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            previous[sig] = signal.signal(sig, lambda *_: stop.set())
    try:
        log.info("starting %s on %s (%d tasks, %s clock)", service_name(hostname),
                 mode, len(tasks), mode)
        summary = run_logging_service(tasks, clock, stop, opener=opener,
                                      duration=args.duration, fsync=args.fsync)
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)

    if args.json:
        doc = summary.to_dict()
        doc.update({"command": "run", "host": hostname, "mode": mode,
                    "interrupted": stop.is_set()})
        _emit_json(doc)
    else:
        for t in summary.tasks.values():
            _out(f"{t.sensor_id}: ticks={t.ticks} ok={t.ok} partial={t.partial} "
                 f"failed={t.failed} missed={t.missed} rows={t.rows}")
        if stop.is_set():
            _err("stopped by signal")
    return 0


# -- simulate --------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except OSError as exc:
        raise UsageError(f"cannot read scenario {args.scenario}: {exc.strerror or exc}") from exc
    except ScenarioError as exc:
        raise UsageError(f"{args.scenario}: {exc}") from exc
    clock = SimClock(scenario.start or 0.0)
    buses = scenario.build(clock)
    clock.sleep(args.at)
    doc_buses = []
    for port, bus in buses.items():
        slaves = []
        for address in sorted(bus.slaves):
            slave = bus.slaves[address]
            banks = {}
            for name, code in (("holding", 3), ("input", 4)):
                regs = set(slave.bank(code))
                for (fn_code, reg) in slave.series:
                    if fn_code == code:
                        regs.update((reg, reg + 1))
                values = {}
                for reg in sorted(regs):
                    words = slave.read(code, reg, 1, bus.elapsed())
                    values[str(reg)] = words[0]
                banks[name] = values
            slaves.append({"address": address, "faults": len(slave.faults.script),
                           "holding": banks["holding"], "input": banks["input"]})
        doc_buses.append({"port": port, "slaves": slaves})
    if args.json:
        _emit_json({"command": "simulate", "at": args.at, "buses": doc_buses})
    else:
        for bus in doc_buses:
            _out(f"bus {bus['port']}")
            for s in bus["slaves"]:
                _out(f"  slave {s['address']} (fault script: {s['faults']} steps)")
                for bank in ("holding", "input"):
                    for reg, word in s[bank].items():
                        _out(f"    {bank} {reg}: 0x{word:04X}")
    return 0


# -- gen-service -----------------------------------------------------------

def cmd_gen_service(args) -> int:
    inv = _load_inventory(args.inventory)
    hostname = _pick_host(inv, args.host)
    try:
        host = inv.host(hostname)
    except UnknownHost as exc:
        _err(f"error: {exc}")
        return 1
    working_dir = args.working_dir or f"/home/{host.username}"
    unit_inventory = args.unit_inventory or str(Path(args.inventory).resolve())
    text = render_service_unit(hostname, args.exec_path, working_dir,
                               inventory_path=unit_inventory, user=host.username)
    unit_name = f"{service_name(hostname)}.service"
    path = None
    if args.output:
        path = Path(args.output)
        if path.is_dir():
            path = path / unit_name
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from exc
    if args.json:
        _emit_json({"command": "gen-service", "unit_name": unit_name,
                    "path": str(path) if path else None, "text": text})
    elif path is None:
        sys.stdout.write(text)
    else:
        _err(f"wrote {path}")
    return 0


# -- parser ----------------------------------------------------------------

def _add_serial_flags(p) -> None:
    p.add_argument("--port", help="serial device, e.g. /dev/ttyUSB0 or /dev/ttyAMA0")
    p.add_argument("--scenario", help="use a simulated bus from this scenario file")
    p.add_argument("--baud", type=int)
    p.add_argument("--parity", choices=["none", "even", "odd"])
    p.add_argument("--stop-bits", type=int, choices=[1, 2])
    p.add_argument("--byte-size", type=int, choices=[7, 8])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modlog", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"modlog {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check an inventory file")
    p.add_argument("-i", "--inventory", required=True)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("scan", help="list responding slave addresses")
    _add_serial_flags(p)
    p.add_argument("--range", default="1-32", help="address range, default 1-32")
    p.add_argument("--full", action="store_true", help="scan 1-247")
    p.add_argument("--timeout-ms", type=float, default=100.0)
    p.add_argument("--function", default="holding", choices=["holding", "input"])
    p.add_argument("--register", type=lambda s: int(s, 0), default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("read", help="read one sensor once")
    p.add_argument("sensor_type")
    _add_serial_flags(p)
    p.add_argument("--slave", type=int, required=True)
    p.add_argument("--timeout-ms", type=float, default=1000.0)
    p.add_argument("--attempts", type=int, default=3)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_read)

    p = sub.add_parser("run", help="run the logging service")
    p.add_argument("-i", "--inventory", required=True)
    p.add_argument("--host", help="hostname in the inventory (default: only host, else this machine)")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.add_argument("--scenario", help="bind ports to a simulated bus (needs --duration)")
    p.add_argument("--sim-start", help="ISO 8601 start of simulated time")
    p.add_argument("--output-dir", help="override every sensor's output_dir")
    p.add_argument("--fsync", action="store_true", help="fsync after every row")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="inspect a scenario's virtual bus")
    p.add_argument("scenario")
    p.add_argument("--at", type=float, default=0.0, help="seconds after scenario start")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-service", help="render the systemd unit")
    p.add_argument("-i", "--inventory", required=True)
    p.add_argument("--host")
    p.add_argument("--exec", dest="exec_path", default="/usr/local/bin/modlog")
    p.add_argument("--working-dir")
    p.add_argument("--unit-inventory", help="inventory path used in ExecStart")
    p.add_argument("--output", help="write the unit here (file or directory) instead of stdout")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gen_service)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        if getattr(args, "json", False):
            _emit_json({"command": args.command, "error": str(exc)})
        _err(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
