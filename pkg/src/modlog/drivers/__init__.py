"""Sensor drivers as data: register maps, the registry, and sensor reads."""
from .descriptor import (
    DescriptorError,
    DriverDescriptor,
    RegisterMapping,
    Violation,
    descriptor_from_dict,
    load_descriptor_file,
    serial_from_dict,
    validate_descriptor,
)
from .reading import Reading, ReadingStatus, failed_reading, read_sensor
from .registry import (
    DuplicateSensorType,
    InvalidDescriptor,
    UnknownSensorType,
    register,
    registered_types,
    registry_lookup,
    shipped_descriptors,
    template_text,
    unregister,
)

__all__ = [
    "DescriptorError", "DriverDescriptor", "DuplicateSensorType", "InvalidDescriptor",
    "Reading", "ReadingStatus", "RegisterMapping", "UnknownSensorType", "Violation",
    "descriptor_from_dict", "failed_reading", "load_descriptor_file", "read_sensor",
    "register", "registered_types", "registry_lookup", "serial_from_dict",
    "shipped_descriptors", "template_text", "unregister", "validate_descriptor",
]
