"""Scenario files: data-driven virtual buses for demos and tests.

A scenario lists buses by port, the slaves on each, their initial registers,
time-varying series and fault scripts::

    version: 1
    start: "2025-03-01T00:00:00Z"
    buses:
      - port: /dev/ttyAMA0
        slaves:
          - address: 1
            registers:
              - {function: holding, register: 0, float32: 25.0, word_order: low_word_first}
              - {function: input, register: 10, words: [0x0001, 0x0002]}
            series:
              - {function: holding, register: 0, kind: step, at: 30, before: 25.0, after: 30.0}
            faults: [respond, drop, corrupt_crc, {exception: 2}, {delay_ms: 200}]
            random_faults: {drop: 0.1, corrupt_crc: 0.05, length: 10000, seed: 1}
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import yaml

from .clock import SimClock, parse_utc
from .modbus import DataType, FunctionCode, ValueCodec, WordOrder
from .simulator import (
    CORRUPT_CRC,
    DROP,
    RESPOND,
    Fault,
    FaultProfile,
    VirtualBus,
    VirtualSlave,
)
from .transport import PortNotFound, SerialConfig, VirtualEndpoint


class ScenarioError(ValueError):
    pass


_TYPED_KEYS = {"u16": DataType.U16, "s16": DataType.S16, "u32": DataType.U32,
               "s32": DataType.S32, "float32": DataType.FLOAT32}


def _codec(doc: dict, default_type: DataType = DataType.FLOAT32) -> ValueCodec:
    return ValueCodec(
        datatype=DataType(str(doc.get("datatype", default_type.value)).lower()),
        word_order=WordOrder(str(doc.get("word_order", "high_word_first")).lower()),
        scale=doc.get("scale", 1),
        offset=doc.get("offset", 0),
    )


def _series_fn(doc: dict) -> Callable[[float], tuple]:
    codec = _codec(doc)
    if codec.word_count != 2:
        raise ScenarioError("series need a 32-bit datatype")
    kind = doc.get("kind", "constant")
    if kind == "constant":
        value = float(doc["value"])
        fn = lambda t: value  # noqa: E731
    elif kind == "step":
        at, before, after = float(doc["at"]), float(doc["before"]), float(doc["after"])
        fn = lambda t: before if t < at else after  # noqa: E731
    elif kind == "linear":
        base, slope = float(doc.get("start", 0)), float(doc.get("slope", 0))
        fn = lambda t: base + slope * t  # noqa: E731
    elif kind == "sine":
        mean, amp = float(doc.get("mean", 0)), float(doc.get("amplitude", 1))
        period, phase = float(doc.get("period", 86400)), float(doc.get("phase", 0))
        fn = lambda t: mean + amp * math.sin(2 * math.pi * (t + phase) / period)  # noqa: E731
    else:
        raise ScenarioError(f"unknown series kind {kind!r}")
    return lambda t: codec.encode(fn(t))


def _fault(item) -> Fault:
    if isinstance(item, str):
        simple = {"respond": RESPOND, "drop": DROP, "corrupt_crc": CORRUPT_CRC}
        if item not in simple:
            raise ScenarioError(f"unknown fault {item!r}")
        return simple[item]
    if isinstance(item, dict) and len(item) == 1:
        (key, value), = item.items()
        if key == "exception":
            return Fault.exception(int(value))
        if key == "delay_ms":
            return Fault.delay(float(value))
        if key == "raw":
            return Fault.raw(bytes.fromhex(str(value)))
    raise ScenarioError(f"unknown fault {item!r}")


@dataclass
class SlaveSpec:
    address: int
    registers: List[dict] = field(default_factory=list)
    series: List[dict] = field(default_factory=list)
    faults: List[Any] = field(default_factory=list)
    cycle_faults: bool = False
    random_faults: Optional[dict] = None

    def build(self) -> VirtualSlave:
        slave = VirtualSlave(self.address)
        for r in self.registers:
            function = FunctionCode.parse(r.get("function", "holding"))
            start = int(r["register"])
            if "words" in r:
                words = [int(w) for w in r["words"]]
            else:
                typed = [k for k in _TYPED_KEYS if k in r]
                if len(typed) != 1:
                    raise ScenarioError(f"register entry needs 'words' or one typed value: {r}")
                codec = _codec(dict(r, datatype=typed[0]))
                words = list(codec.encode(float(r[typed[0]])))
            slave.load(function, start, words)
        for s in self.series:
            slave.set_register_series(int(s["register"]), _series_fn(s),
                                      FunctionCode.parse(s.get("function", "holding")))
        if self.random_faults:
            rf = self.random_faults
            slave.faults = FaultProfile.random(
                int(rf.get("length", 100000)), float(rf.get("drop", 0)),
                float(rf.get("corrupt_crc", 0)), rf.get("seed"), bool(rf.get("cycle", False)))
        elif self.faults:
            slave.faults = FaultProfile([_fault(f) for f in self.faults], cycle=self.cycle_faults)
        return slave


@dataclass
class Scenario:
    buses: Dict[str, List[SlaveSpec]]
    start: Optional[float] = None

    def build(self, clock) -> Dict[str, VirtualBus]:
        """Fresh buses (and fault cursors) bound to ``clock``."""
        out = {}
        for port, slaves in self.buses.items():
            bus = VirtualBus(clock, name=port, log_limit=0)
            for spec in slaves:
                bus.attach_slave(spec.build())
            out[port] = bus
        return out


_SLAVE_KEYS = {"address", "registers", "series", "faults", "cycle_faults", "random_faults"}


def _no_unknown(doc, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    unknown = set(doc) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}")


def parse_scenario(text: str) -> Scenario:
    try:
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ScenarioError("scenario must be a mapping")
        unknown = set(doc) - {"version", "start", "buses"}
        if unknown:
            raise ScenarioError(f"unknown key(s) {sorted(unknown)}")
        start = parse_utc(str(doc["start"])) if doc.get("start") else None
        buses: Dict[str, List[SlaveSpec]] = {}
        for i, bus in enumerate(doc.get("buses") or []):
            _no_unknown(bus, {"port", "slaves"}, f"buses[{i}]")
            port = str(bus["port"])
            slaves = []
            for j, s in enumerate(bus.get("slaves") or []):
                _no_unknown(s, _SLAVE_KEYS, f"buses[{i}].slaves[{j}]")
                faults = s.get("faults") or []
                spec = SlaveSpec(int(s["address"]), list(s.get("registers") or []),
                                 list(s.get("series") or []), list(faults),
                                 bool(s.get("cycle_faults", False)), s.get("random_faults"))
                slaves.append(spec)
            buses[port] = slaves
        scenario = Scenario(buses, start)
        # Build once so bad register values or fault names fail at load time.
        scenario.build(SimClock(0.0))
        return scenario
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(f"invalid scenario: {type(exc).__name__}: {exc}") from exc


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def scenario_opener(buses: Dict[str, VirtualBus]):
    """Endpoint opener binding inventory ports to scenario buses."""

    def opener(config: SerialConfig, clock):
        bus = buses.get(config.port)
        if bus is None:
            raise PortNotFound(f"port {config.port} is not part of the scenario")
        return VirtualEndpoint(config, bus, clock)

    return opener
