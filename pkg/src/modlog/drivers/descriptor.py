"""Declarative sensor drivers: a register map plus serial defaults."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import yaml

from ..modbus import DataType, FunctionCode, ValueCodec, WordOrder
from ..transport import Parity, SerialConfig

NAME_RE = re.compile(r"^[a-z0-9_]+$")


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class RegisterMapping:
    name: str
    function: FunctionCode
    start_register: int
    codec: ValueCodec
    unit: str
    # Optional post-decode conversion for sensors with nonlinear outputs.
    transform: Optional[Callable[[float], float]] = field(default=None, compare=False)

    @property
    def register_range(self) -> range:
        return range(self.start_register, self.start_register + self.codec.word_count)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "function": self.function.short_name,
            "register": self.start_register,
            "datatype": self.codec.datatype.value,
            "word_order": self.codec.word_order.value,
            "scale": self.codec.scale,
            "offset": self.codec.offset,
            "unit": self.unit,
        }


@dataclass(frozen=True)
class DriverDescriptor:
    sensor_type: str
    display_name: str
    default_serial: SerialConfig
    mappings: Tuple[RegisterMapping, ...]
    min_poll_interval: float = 1.0
    provenance: str = "datasheet"

    @property
    def measurement_names(self) -> List[str]:
        return [m.name for m in self.mappings]

    @property
    def units(self) -> Dict[str, str]:
        return {m.name: m.unit for m in self.mappings}

    def mapping(self, name: str) -> RegisterMapping:
        for m in self.mappings:
            if m.name == name:
                return m
        raise KeyError(name)

    def with_overrides(self, overrides: Dict[str, dict]) -> "DriverDescriptor":
        """Copy with per-mapping register/codec fields replaced."""
        mappings = []
        for m in self.mappings:
            o = overrides.get(m.name)
            if not o:
                mappings.append(m)
                continue
            codec = ValueCodec(
                datatype=o.get("datatype", m.codec.datatype),
                word_order=o.get("word_order", m.codec.word_order),
                scale=o.get("scale", m.codec.scale),
                offset=o.get("offset", m.codec.offset),
            )
            mappings.append(replace(
                m,
                function=FunctionCode.parse(o.get("function", m.function)),
                start_register=o.get("register", m.start_register),
                codec=codec,
                unit=o.get("unit", m.unit),
            ))
        return replace(self, mappings=tuple(mappings))

    def to_dict(self) -> dict:
        s = self.default_serial
        return {
            "sensor_type": self.sensor_type,
            "display_name": self.display_name,
            "provenance": self.provenance,
            "min_poll_interval": self.min_poll_interval,
            "serial": {
                "baud": s.baud,
                "parity": s.parity.value,
                "stop_bits": s.stop_bits,
                "byte_size": s.byte_size,
            },
            "mappings": [m.to_dict() for m in self.mappings],
        }


@dataclass(frozen=True)
class Violation:
    kind: str
    mapping: Optional[str]
    message: str

    def __str__(self):
        where = f" [{self.mapping}]" if self.mapping else ""
        return f"{self.kind}{where}: {self.message}"


def validate_descriptor(d: DriverDescriptor) -> List[Violation]:
    """Return every broken descriptor invariant; empty means usable."""
    out: List[Violation] = []
    if not NAME_RE.match(d.sensor_type or ""):
        out.append(Violation("InvalidSensorType", None,
                             f"sensor_type {d.sensor_type!r} must match [a-z0-9_]+"))
    if not d.mappings:
        out.append(Violation("NoMappings", None, "descriptor declares no mappings"))
    if d.min_poll_interval < 1:
        out.append(Violation("PollIntervalTooShort", None,
                             f"min_poll_interval {d.min_poll_interval} s is below 1 s"))
    seen = set()
    for m in d.mappings:
        if not NAME_RE.match(m.name or ""):
            out.append(Violation("InvalidName", m.name or "<empty>",
                                 "measurement name must match [a-z0-9_]+"))
        if m.name in seen:
            out.append(Violation("DuplicateName", m.name, "measurement name used twice"))
        seen.add(m.name)
        if not m.unit:
            out.append(Violation("EmptyUnit", m.name, "unit must be non-empty"))
        if m.start_register < 0 or m.register_range.stop > 0x10000:
            out.append(Violation("RegisterOutOfRange", m.name,
                                 f"registers {m.register_range.start}..{m.register_range.stop - 1}"
                                 " fall outside 0..65535"))
    for i, a in enumerate(d.mappings):
        for b in d.mappings[i + 1:]:
            if a.function != b.function:
                continue
            ra, rb = a.register_range, b.register_range
            if ra.start < rb.stop and rb.start < ra.stop:
                out.append(Violation(
                    "OverlappingRegisters", b.name,
                    f"{b.function.short_name} registers {rb.start}..{rb.stop - 1} overlap "
                    f"{a.name} ({ra.start}..{ra.stop - 1})",
                ))
    return out


_MAPPING_KEYS = {"name", "function", "register", "datatype", "word_order", "scale", "offset", "unit"}
_TOP_KEYS = {"sensor_type", "display_name", "provenance", "min_poll_interval", "serial", "mappings"}
_SERIAL_KEYS = {"baud", "parity", "stop_bits", "byte_size"}


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise DescriptorError(f"{where}: expected a mapping")
    unknown = set(doc) - allowed
    if unknown:
        raise DescriptorError(f"{where}: unknown key(s) {sorted(unknown)}")


def serial_from_dict(doc: dict, port: str = "") -> SerialConfig:
    return SerialConfig(
        port=port,
        baud=int(doc.get("baud", 9600)),
        parity=Parity.parse(doc.get("parity", "none")),
        stop_bits=int(doc.get("stop_bits", 1)),
        byte_size=int(doc.get("byte_size", 8)),
    )


def descriptor_from_dict(doc: dict) -> DriverDescriptor:
    _check_keys(doc, _TOP_KEYS, "descriptor")
    for key in ("sensor_type", "mappings"):
        if key not in doc:
            raise DescriptorError(f"descriptor: missing {key!r}")
    serial = doc.get("serial") or {}
    _check_keys(serial, _SERIAL_KEYS, "descriptor.serial")
    mappings = []
    for i, m in enumerate(doc["mappings"] or []):
        where = f"descriptor.mappings[{i}]"
        _check_keys(m, _MAPPING_KEYS, where)
        try:
            codec = ValueCodec(
                datatype=DataType(str(m.get("datatype", "float32")).lower()),
                word_order=WordOrder(str(m.get("word_order", "high_word_first")).lower()),
                scale=m.get("scale", 1),
                offset=m.get("offset", 0),
            )
            mappings.append(RegisterMapping(
                name=str(m.get("name", "")),
                function=FunctionCode.parse(m.get("function", "holding")),
                start_register=int(m["register"]),
                codec=codec,
                unit=str(m.get("unit", "")),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise DescriptorError(f"{where}: {exc}") from exc
    try:
        default_serial = serial_from_dict(serial)
    except ValueError as exc:
        raise DescriptorError(f"descriptor.serial: {exc}") from exc
    return DriverDescriptor(
        sensor_type=str(doc["sensor_type"]).lower(),
        display_name=str(doc.get("display_name", doc["sensor_type"])),
        default_serial=default_serial,
        mappings=tuple(mappings),
        min_poll_interval=float(doc.get("min_poll_interval", 1)),
        provenance=str(doc.get("provenance", "unspecified")),
    )


def load_descriptor_file(path) -> DriverDescriptor:
    text = Path(path).read_text(encoding="utf-8")
    return descriptor_from_dict(yaml.safe_load(text))
