"""``metadata.json`` sidecar describing how a sensor's CSV files were made."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .. import __version__
from ..clock import as_clock, format_utc
from .csvfile import RECOVERY_POLICY, StoragePermissionDenied

SCHEMA_VERSION = 1


def metadata_path(base, sensor_id: str) -> Path:
    return Path(base) / "data" / sensor_id / "metadata.json"


def build_metadata(task, descriptor, created_at: str) -> dict:
    s = task.serial
    return {
        "schema_version": SCHEMA_VERSION,
        "sensor_id": task.sensor_id,
        "sensor_type": task.sensor_type,
        "driver": descriptor.to_dict(),
        "serial": {
            "port": task.port,
            "baud": s.baud,
            "parity": s.parity.value,
            "stop_bits": s.stop_bits,
            "byte_size": s.byte_size,
            "mode": "rtu",
        },
        "slave": task.slave,
        "interval": task.interval,
        "tags": dict(sorted(task.tags.items())),
        "columns": ["timestamp", *task.columns, "status", "error"],
        "units": {name: descriptor.units[name] for name in task.columns},
        "timestamp_format": "ISO 8601 UTC, Z suffix, precision "
                            + ("seconds" if task.timestamp_precision == "s" else "milliseconds"),
        "file_layout": "data/<sensor_id>/<YYYY-MM-DD>.csv, rotated on UTC date",
        "recovery_policy": RECOVERY_POLICY,
        "created_at": created_at,
        "software_version": __version__,
    }


def render_metadata(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_metadata(task, descriptor=None, clock=None) -> Path:
    """Write the sidecar; rewritten only when its content would change.

    ``created_at`` is carried over from an existing file so unchanged
    configuration yields byte-identical output.
    """
    descriptor = descriptor or task.descriptor
    path = metadata_path(task.output_dir, task.sensor_id)
    created_at = None
    old_text = None
    if path.exists():
        old_text = path.read_text(encoding="utf-8")
        try:
            created_at = json.loads(old_text).get("created_at")
        except (ValueError, AttributeError):
            created_at = None
    if not created_at:
        created_at = format_utc(as_clock(clock).now())
    text = render_metadata(build_metadata(task, descriptor, created_at))
    if text == old_text:
        return path
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".metadata.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except PermissionError as exc:
        raise StoragePermissionDenied(exc.errno, f"permission denied writing {path}") from exc
    return path
