from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

from ..drivers import DriverDescriptor
from ..transport import RetryPolicy, SerialConfig

SENSOR_ID_RE = re.compile(r"^[a-z0-9_-]+$")


@dataclass(frozen=True)
class LoggingTask:
    """Everything the service needs to poll and log one sensor."""

    sensor_id: str
    sensor_type: str
    slave: int
    port: str
    serial: SerialConfig
    interval: float
    descriptor: DriverDescriptor
    tags: Dict[str, str] = field(default_factory=dict)
    output_dir: Path = Path("sensor_logging")
    retry: RetryPolicy = RetryPolicy()
    timestamp_precision: str = "s"

    def __post_init__(self):
        if not SENSOR_ID_RE.match(self.sensor_id):
            raise ValueError(f"sensor_id {self.sensor_id!r} must match [a-z0-9_-]+")
        if self.interval < self.descriptor.min_poll_interval:
            raise ValueError(
                f"{self.sensor_id}: interval {self.interval} s is below the "
                f"{self.sensor_type} minimum of {self.descriptor.min_poll_interval} s")
        if self.timestamp_precision not in ("s", "ms"):
            raise ValueError("timestamp_precision must be 's' or 'ms'")
        object.__setattr__(self, "output_dir", Path(self.output_dir))

    @property
    def columns(self):
        return sorted(self.descriptor.measurement_names)
