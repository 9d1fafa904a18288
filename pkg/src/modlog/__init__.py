"""Modbus-RTU sensor logging engine with a built-in virtual bus."""

__version__ = "0.1.0"
