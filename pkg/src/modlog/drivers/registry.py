"""Sensor-type registry, populated from the shipped descriptor files."""
from __future__ import annotations

import threading
from importlib import resources
from typing import Dict, List

import yaml

from .descriptor import DriverDescriptor, descriptor_from_dict, validate_descriptor


class UnknownSensorType(KeyError):
    def __init__(self, sensor_type: str, known: List[str]):
        self.sensor_type = sensor_type
        self.known = known
        super().__init__(f"unknown sensor type {sensor_type!r}; registered: {', '.join(known)}")

    def __str__(self):
        return self.args[0]


class InvalidDescriptor(ValueError):
    pass


class DuplicateSensorType(ValueError):
    pass


_registry: Dict[str, DriverDescriptor] = {}
_loaded = False
_lock = threading.Lock()


def shipped_descriptors() -> List[DriverDescriptor]:
    out = []
    root = resources.files("modlog.drivers") / "descriptors"
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".yaml") and not entry.name.startswith("_"):
            out.append(descriptor_from_dict(yaml.safe_load(entry.read_text(encoding="utf-8"))))
    return out


def template_text() -> str:
    """The documented driver template, as shipped."""
    return (resources.files("modlog.drivers") / "descriptors" / "_template.yaml").read_text(
        encoding="utf-8")


def _ensure_loaded() -> None:
    global _loaded
    if _loaded:
        return
    with _lock:
        if not _loaded:
            for d in shipped_descriptors():
                _add(d)
            _loaded = True


def _add(d: DriverDescriptor, replace: bool = False) -> None:
    violations = validate_descriptor(d)
    if violations:
        raise InvalidDescriptor(
            f"descriptor {d.sensor_type!r} is invalid: " + "; ".join(map(str, violations)))
    key = d.sensor_type.lower()
    if key in _registry and not replace:
        raise DuplicateSensorType(f"sensor type {key!r} is already registered")
    _registry[key] = d


def register(d: DriverDescriptor, replace: bool = False) -> None:
    """Add a validated descriptor; intended for start-up time only."""
    _ensure_loaded()
    with _lock:
        _add(d, replace)


def unregister(sensor_type: str) -> None:
    _ensure_loaded()
    with _lock:
        _registry.pop(sensor_type.lower(), None)


def registered_types() -> List[str]:
    _ensure_loaded()
    return sorted(_registry)


def registry_lookup(sensor_type: str) -> DriverDescriptor:
    _ensure_loaded()
    try:
        return _registry[str(sensor_type).lower()]
    except KeyError:
        raise UnknownSensorType(str(sensor_type), registered_types()) from None
