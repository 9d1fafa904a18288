"""The single-file YAML inventory: parse, validate, plan tasks, render units.

Unknown keys are errors rather than warnings: in an unattended deployment a
misspelt ``intervall`` silently falling back to a default loses data.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .drivers import (
    UnknownSensorType,
    registry_lookup,
    validate_descriptor,
)
from .logger.task import SENSOR_ID_RE, LoggingTask
from .modbus import DataType, FunctionCode, InvalidAddress, WordOrder, check_slave_address
from .transport import Parity, RetryPolicy, SerialConfig

SUPPORTED_VERSIONS = (1,)
HOSTNAME_RE = re.compile(r"^[a-z0-9-]+$")
DEFAULT_INTERVAL = 60.0
DEFAULT_OUTPUT_DIR = "sensor_logging"


class InventoryError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class InventorySyntaxError(InventoryError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}" if line is not None else ""
        super().__init__(where, message)


class UnknownKey(InventoryError):
    pass


class MissingRequiredField(InventoryError):
    pass


class TypeMismatch(InventoryError):
    pass


class InvalidValue(InventoryError):
    pass


class UnknownHost(LookupError):
    pass


class InvalidInventory(ValueError):
    def __init__(self, violations):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class SensorSpec:
    sensor_id: str
    sensor_type: str
    port: str
    slave: int
    # None only when sensor_type is unknown; validation reports that.
    serial: Optional[SerialConfig]
    mode: str = "rtu"
    interval: float = DEFAULT_INTERVAL
    tags: Dict[str, str] = field(default_factory=dict)
    output_dir: str = DEFAULT_OUTPUT_DIR
    retry: RetryPolicy = RetryPolicy()
    overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    timestamp_precision: str = "s"


@dataclass(frozen=True)
class HostSpec:
    hostname: str
    address: str
    username: str
    sensors: Tuple[SensorSpec, ...]


@dataclass(frozen=True)
class Inventory:
    hosts: Tuple[HostSpec, ...]
    version: int = 1

    def host(self, hostname: str) -> HostSpec:
        for h in self.hosts:
            if h.hostname == hostname:
                return h
        raise UnknownHost(
            f"host {hostname!r} not in inventory; known: {', '.join(h.hostname for h in self.hosts)}")

    @property
    def sensor_count(self) -> int:
        return sum(len(h.sensors) for h in self.hosts)


# -- parsing ---------------------------------------------------------------

_TOP = {"version", "hosts"}
_HOST = {"hostname", "address", "username", "sensors"}
_SENSOR = {"sensor_id", "sensor_type", "port", "slave", "mode", "interval", "tags",
           "output_dir", "serial", "retry", "overrides", "timestamp_precision"}
_SERIAL = {"baud", "parity", "stop_bits", "byte_size"}
_RETRY = {"attempts", "timeout_ms"}
_OVERRIDE = {"function", "register", "datatype", "word_order", "scale", "offset", "unit"}

_TYPE_NAMES = {dict: "mapping", list: "list", str: "string", int: "integer",
               float: "number", bool: "boolean"}


def _type_name(types) -> str:
    if not isinstance(types, tuple):
        types = (types,)
    return " or ".join(_TYPE_NAMES.get(t, t.__name__) for t in types)


def _expect(value, types, path: str):
    ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in
                                           (types if isinstance(types, tuple) else (types,)))
    if not ok:
        raise TypeMismatch(path, f"expected {_type_name(types)}, got {type(value).__name__}")
    return value


def _mapping(doc, allowed: set, required: tuple, path: str) -> dict:
    _expect(doc, dict, path or "<document>")
    for key in doc:
        if key not in allowed:
            raise UnknownKey(f"{path}.{key}" if path else str(key),
                             f"unknown key {key!r} (allowed: {', '.join(sorted(allowed))})")
    for key in required:
        if key not in doc or doc[key] is None:
            raise MissingRequiredField(f"{path}.{key}" if path else key,
                                       f"required field {key!r} is missing")
    return doc


def _number(value, path: str) -> float:
    return float(_expect(value, (int, float), path))


def _parse_serial(doc, defaults: Optional[SerialConfig], port: str, path: str) -> Optional[SerialConfig]:
    doc = _mapping(doc or {}, _SERIAL, (), path)
    if defaults is None:
        if not doc:
            return None
        defaults = SerialConfig(port=port)
    try:
        return SerialConfig(
            port=port,
            baud=_expect(doc.get("baud", defaults.baud), int, f"{path}.baud"),
            parity=Parity.parse(_expect(doc.get("parity", defaults.parity.value), str,
                                        f"{path}.parity")),
            stop_bits=_expect(doc.get("stop_bits", defaults.stop_bits), int, f"{path}.stop_bits"),
            byte_size=_expect(doc.get("byte_size", defaults.byte_size), int, f"{path}.byte_size"),
        )
    except ValueError as exc:
        if isinstance(exc, InventoryError):
            raise
        raise InvalidValue(path, str(exc)) from exc


def _parse_overrides(doc, path: str) -> Dict[str, Dict[str, Any]]:
    _expect(doc, dict, path)
    out = {}
    for name, o in doc.items():
        p = f"{path}.{name}"
        _mapping(o, _OVERRIDE, (), p)
        o = dict(o)
        try:
            if "function" in o:
                o["function"] = FunctionCode.parse(o["function"]).short_name
            if "register" in o:
                o["register"] = _expect(o["register"], int, f"{p}.register")
                if not 0 <= o["register"] <= 0xFFFF:
                    raise ValueError(f"register {o['register']} outside 0..65535")
            if "datatype" in o:
                o["datatype"] = DataType(str(o["datatype"]).lower()).value
            if "word_order" in o:
                o["word_order"] = WordOrder(str(o["word_order"]).lower()).value
            for key in ("scale", "offset"):
                if key in o:
                    o[key] = _number(o[key], f"{p}.{key}")
            if o.get("scale") == 0:
                raise ValueError("scale must be non-zero")
            if "unit" in o:
                o["unit"] = _expect(o["unit"], str, f"{p}.unit")
        except InventoryError:
            raise
        except ValueError as exc:
            raise InvalidValue(p, str(exc)) from exc
        out[str(name)] = o
    return out


def _parse_sensor(doc, path: str) -> SensorSpec:
    _mapping(doc, _SENSOR, ("sensor_id", "sensor_type", "port", "slave"), path)
    sensor_id = _expect(doc["sensor_id"], str, f"{path}.sensor_id")
    if not SENSOR_ID_RE.match(sensor_id):
        raise InvalidValue(f"{path}.sensor_id", f"{sensor_id!r} must match [a-z0-9_-]+")
    sensor_type = _expect(doc["sensor_type"], str, f"{path}.sensor_type").lower()
    port = _expect(doc["port"], str, f"{path}.port")
    try:
        slave = check_slave_address(_expect(doc["slave"], int, f"{path}.slave"))
    except InvalidAddress as exc:
        raise InvalidValue(f"{path}.slave", str(exc)) from exc
    mode = _expect(doc.get("mode", "rtu"), str, f"{path}.mode").lower()
    if mode != "rtu":
        raise InvalidValue(f"{path}.mode", f"only 'rtu' is supported, got {mode!r}")
    interval = _number(doc.get("interval", DEFAULT_INTERVAL), f"{path}.interval")
    if interval <= 0:
        raise InvalidValue(f"{path}.interval", "interval must be positive")
    tags_doc = _expect(doc.get("tags") or {}, dict, f"{path}.tags")
    tags = {}
    for key, value in tags_doc.items():
        _expect(value, (str, int, float, bool), f"{path}.tags.{key}")
        tags[str(key)] = str(value)
    output_dir = _expect(doc.get("output_dir", DEFAULT_OUTPUT_DIR), str, f"{path}.output_dir")
    precision = _expect(doc.get("timestamp_precision", "s"), str, f"{path}.timestamp_precision")
    if precision not in ("s", "ms"):
        raise InvalidValue(f"{path}.timestamp_precision", "must be 's' or 'ms'")

    try:
        defaults = registry_lookup(sensor_type).default_serial
    except UnknownSensorType:
        defaults = None
    serial = _parse_serial(doc.get("serial"), defaults, port, f"{path}.serial")

    retry_doc = _mapping(doc.get("retry") or {}, _RETRY, (), f"{path}.retry")
    try:
        retry = RetryPolicy(
            attempts=_expect(retry_doc.get("attempts", 3), int, f"{path}.retry.attempts"),
            timeout_ms=_number(retry_doc.get("timeout_ms", 1000), f"{path}.retry.timeout_ms"),
        )
    except InventoryError:
        raise
    except ValueError as exc:
        raise InvalidValue(f"{path}.retry", str(exc)) from exc

    overrides = _parse_overrides(doc.get("overrides") or {}, f"{path}.overrides")
    return SensorSpec(sensor_id, sensor_type, port, slave, serial, mode, interval, tags,
                      output_dir, retry, overrides, precision)


def _parse_host(doc, path: str) -> HostSpec:
    _mapping(doc, _HOST, ("hostname", "address", "sensors"), path)
    hostname = _expect(doc["hostname"], str, f"{path}.hostname")
    if not HOSTNAME_RE.match(hostname):
        raise InvalidValue(f"{path}.hostname", f"{hostname!r} must match [a-z0-9-]+")
    address = _expect(doc["address"], str, f"{path}.address")
    username = _expect(doc.get("username", "pi"), str, f"{path}.username")
    sensors_doc = _expect(doc["sensors"], list, f"{path}.sensors")
    sensors = tuple(_parse_sensor(s, f"{path}.sensors[{i}]") for i, s in enumerate(sensors_doc))
    return HostSpec(hostname, address, username, sensors)


def parse_inventory(text: str) -> Inventory:
    """Parse inventory YAML; errors carry a path like ``hosts[0].sensors[1].slave``."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        if mark is not None:
            raise InventorySyntaxError(problem, mark.line + 1, mark.column + 1) from exc
        raise InventorySyntaxError(problem) from exc
    if doc is None:
        raise MissingRequiredField("hosts", "required field 'hosts' is missing (empty document)")
    _mapping(doc, _TOP, ("hosts",), "")
    version = _expect(doc.get("version", 1), int, "version")
    if version not in SUPPORTED_VERSIONS:
        raise InvalidValue("version", f"unsupported schema version {version}")
    hosts_doc = _expect(doc["hosts"], list, "hosts")
    if not hosts_doc:
        raise InvalidValue("hosts", "at least one host is required")
    hosts = tuple(_parse_host(h, f"hosts[{i}]") for i, h in enumerate(hosts_doc))
    return Inventory(hosts, version)


def load_inventory(path) -> Inventory:
    return parse_inventory(Path(path).read_text(encoding="utf-8"))


# -- canonical form --------------------------------------------------------

def _sensor_to_dict(s: SensorSpec) -> dict:
    out: Dict[str, Any] = {
        "sensor_id": s.sensor_id,
        "sensor_type": s.sensor_type,
        "port": s.port,
        "slave": s.slave,
        "mode": s.mode,
        "interval": s.interval,
        "tags": dict(s.tags),
        "output_dir": s.output_dir,
    }
    if s.serial is not None:
        out["serial"] = {
            "baud": s.serial.baud,
            "parity": s.serial.parity.value,
            "stop_bits": s.serial.stop_bits,
            "byte_size": s.serial.byte_size,
        }
    out["retry"] = {"attempts": s.retry.attempts, "timeout_ms": s.retry.timeout_ms}
    if s.overrides:
        out["overrides"] = {k: dict(v) for k, v in s.overrides.items()}
    out["timestamp_precision"] = s.timestamp_precision
    return out


def inventory_to_dict(inv: Inventory) -> dict:
    return {
        "version": inv.version,
        "hosts": [
            {
                "hostname": h.hostname,
                "address": h.address,
                "username": h.username,
                "sensors": [_sensor_to_dict(s) for s in h.sensors],
            }
            for h in inv.hosts
        ],
    }


def dump_inventory(inv: Inventory) -> str:
    """Canonical YAML with every default spelled out."""
    return yaml.safe_dump(inventory_to_dict(inv), sort_keys=False, default_flow_style=False)


# -- validation ------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.kind}: {self.message}"


def validate_inventory(inv: Inventory) -> List[Violation]:
    """Everything that would make the inventory undeployable; empty if none."""
    out: List[Violation] = []
    hostnames: Dict[str, int] = {}
    for hi, host in enumerate(inv.hosts):
        hpath = f"hosts[{hi}]"
        if host.hostname in hostnames:
            out.append(Violation("DuplicateHostname", f"{hpath}.hostname",
                                 f"{host.hostname!r} already used by hosts[{hostnames[host.hostname]}]"))
        else:
            hostnames[host.hostname] = hi
        ids: Dict[str, int] = {}
        slaves: Dict[Tuple[str, int], int] = {}
        bus_settings: Dict[str, int] = {}
        for si, s in enumerate(host.sensors):
            spath = f"{hpath}.sensors[{si}]"
            if s.sensor_id in ids:
                out.append(Violation("DuplicateSensorId", f"{spath}.sensor_id",
                                     f"{s.sensor_id!r} already used by {hpath}.sensors[{ids[s.sensor_id]}]"))
            else:
                ids[s.sensor_id] = si
            key = (s.port, s.slave)
            if key in slaves:
                out.append(Violation("DuplicateSlaveAddress", f"{spath}.slave",
                                     f"slave {s.slave} on {s.port} already used by "
                                     f"{hpath}.sensors[{slaves[key]}]"))
            else:
                slaves[key] = si
            try:
                descriptor = registry_lookup(s.sensor_type)
            except UnknownSensorType as exc:
                out.append(Violation("UnknownSensorType", f"{spath}.sensor_type", str(exc)))
                descriptor = None
            if descriptor is not None:
                if s.interval < descriptor.min_poll_interval:
                    out.append(Violation("IntervalBelowMinimum", f"{spath}.interval",
                                         f"{s.interval:g} s is below the {s.sensor_type} minimum "
                                         f"of {descriptor.min_poll_interval:g} s"))
                for name in s.overrides:
                    if name not in descriptor.measurement_names:
                        out.append(Violation("UnknownMeasurement", f"{spath}.overrides.{name}",
                                             f"{s.sensor_type} has no measurement {name!r}"))
                known = {k: v for k, v in s.overrides.items() if k in descriptor.measurement_names}
                for v in validate_descriptor(descriptor.with_overrides(known)):
                    out.append(Violation("InvalidOverride", f"{spath}.overrides", str(v)))
            if s.serial is None:
                continue
            first = bus_settings.get(s.port)
            if first is None:
                bus_settings[s.port] = si
                continue
            other = host.sensors[first]
            if other.serial is not None and other.serial.line_settings() != s.serial.line_settings():
                out.append(Violation(
                    "SharedBusSerialConflict", f"{spath}.serial",
                    f"{s.port} runs {other.serial.describe()} for {hpath}.sensors[{first}] "
                    f"but {s.serial.describe()} here; one bus has one line setting"))
    return out


# -- planning --------------------------------------------------------------

def _normalize_dir(path: str) -> Path:
    return Path(os.path.normpath(os.path.expanduser(path)))


def plan_tasks(inv: Inventory, hostname: str) -> List[LoggingTask]:
    """One fully resolved task per sensor on ``hostname``, ordered by (port, slave)."""
    host = inv.host(hostname)
    violations = validate_inventory(inv)
    if violations:
        raise InvalidInventory(violations)
    tasks = []
    for s in host.sensors:
        descriptor = registry_lookup(s.sensor_type)
        if s.overrides:
            descriptor = descriptor.with_overrides(s.overrides)
        tasks.append(LoggingTask(
            sensor_id=s.sensor_id,
            sensor_type=s.sensor_type,
            slave=s.slave,
            port=s.port,
            serial=replace(s.serial, port=s.port),
            interval=s.interval,
            descriptor=descriptor,
            tags=dict(s.tags),
            output_dir=_normalize_dir(s.output_dir),
            retry=s.retry,
            timestamp_precision=s.timestamp_precision,
        ))
    tasks.sort(key=lambda t: (t.port, t.slave))
    return tasks


# -- service unit ----------------------------------------------------------

def service_name(hostname: str) -> str:
    return f"sensor-logging-{hostname}"


def render_service_unit(hostname: str, exec_path: str, working_dir, *,
                        inventory_path: str = "inventory.yml",
                        user: Optional[str] = None) -> str:
    """systemd unit text for ``sensor-logging-<hostname>.service``."""
    if not HOSTNAME_RE.match(hostname or ""):
        raise ValueError(f"hostname {hostname!r} must match [a-z0-9-]+")
    lines = [
        "[Unit]",
        f"Description=sensor logging {hostname}",
        "After=network.target",
        "",
        "[Service]",
        "Type=simple",
    ]
    if user:
        lines.append(f"User={user}")
    lines += [
        f"WorkingDirectory={working_dir}",
        f"ExecStart={exec_path} run --inventory {inventory_path} --host {hostname}",
        "Restart=always",
        "RestartSec=5",
        "",
        "[Install]",
        "WantedBy=multi-user.target",
        "",
    ]
    return "\n".join(lines)
