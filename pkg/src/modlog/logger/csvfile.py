"""Daily CSV files: one row per poll, append-only, crash-recoverable.

Rows are written with a single ``write`` on an ``O_APPEND`` descriptor.  On
open, a trailing partial line left by a crash is truncated away, so a reader
never sees half a record after recovery.
"""
from __future__ import annotations

import errno
import logging
import os
from datetime import date
from pathlib import Path
from typing import Iterable, Optional, Tuple

from ..clock import format_utc, utc_datetime
from ..drivers import Reading

log = logging.getLogger(__name__)

RECOVERY_POLICY = "truncate-trailing-partial-line"
_TAIL_CHUNK = 4096


class StorageError(OSError):
    pass


class StorageFull(StorageError):
    pass


class StoragePermissionDenied(StorageError, PermissionError):
    pass


def resolve_output_path(base, sensor_id: str, day: date) -> Path:
    """``base/data/<sensor_id>/<YYYY-MM-DD>.csv``; touches nothing on disk."""
    return Path(base) / "data" / sensor_id / f"{day.isoformat()}.csv"


def header_line(columns: Iterable[str]) -> str:
    return ",".join(["timestamp", *columns, "status", "error"]) + "\n"


def _clean(text: Optional[str]) -> str:
    if not text:
        return ""
    return (text.replace(",", ";").replace("\r", " ").replace("\n", " ")
            .replace('"', "'"))


def format_row(timestamp: str, columns, reading: Reading) -> str:
    cells = [timestamp]
    for name in columns:
        item = reading.values.get(name)
        cells.append("" if item is None else repr(float(item[0])))
    cells.append(reading.status.value)
    cells.append(_clean(reading.error_detail))
    return ",".join(cells) + "\n"


def _write_all(fd: int, data: bytes) -> None:
    view = memoryview(data)
    while view:
        n = os.write(fd, view)
        view = view[n:]


def _storage_error(exc: OSError, path: Path) -> StorageError:
    if exc.errno in (errno.ENOSPC, errno.EDQUOT):
        return StorageFull(exc.errno, f"storage full writing {path}")
    if exc.errno in (errno.EACCES, errno.EPERM, errno.EROFS):
        return StoragePermissionDenied(exc.errno, f"permission denied writing {path}")
    return StorageError(exc.errno, f"{exc.strerror} writing {path}")


def recover_file(path: Path) -> Tuple[Optional[str], Optional[str]]:
    """Drop any partial trailing line; return (header line, last timestamp).

    A file without a complete header line is emptied.
    """
    with open(path, "r+b") as fh:
        size = fh.seek(0, os.SEEK_END)
        if size == 0:
            return None, None
        fh.seek(size - 1)
        if fh.read(1) != b"\n":
            pos = size
            keep = 0
            while pos > 0:
                start = max(0, pos - _TAIL_CHUNK)
                fh.seek(start)
                chunk = fh.read(pos - start)
                idx = chunk.rfind(b"\n")
                if idx >= 0:
                    keep = start + idx + 1
                    break
                pos = start
            log.warning("%s: truncating partial trailing line (%d bytes)", path, size - keep)
            fh.truncate(keep)
            size = keep
            if size == 0:
                return None, None
        fh.seek(0)
        header = fh.readline()
        start = max(0, size - _TAIL_CHUNK)
        fh.seek(start)
        tail = fh.read(size - start)
    text = header.decode("utf-8", "replace")
    if len(header) >= size:
        return text, None
    last = tail.rstrip(b"\n").rsplit(b"\n", 1)[-1]
    return text, last.split(b",", 1)[0].decode("utf-8", "replace")


class DailyCsvWriter:
    """Appends readings of one sensor to its per-UTC-day file."""

    def __init__(self, base, sensor_id: str, columns, precision: str = "s",
                 fsync: bool = False):
        self.base = Path(base)
        self.sensor_id = sensor_id
        self.columns = list(columns)
        self.precision = precision
        self.fsync = fsync
        self.header = header_line(self.columns)
        self.path: Optional[Path] = None
        self._day: Optional[date] = None
        self._fd: Optional[int] = None
        self.last_timestamp: Optional[str] = None

    def _candidates(self, day: date):
        first = resolve_output_path(self.base, self.sensor_id, day)
        yield first
        n = 1
        while True:
            yield first.with_name(f"{first.stem}_{n}.csv")
            n += 1

    def _open(self, day: date) -> None:
        self.close()
        for path in self._candidates(day):
            if not path.exists():
                header = last = None
                break
            header, last = recover_file(path)
            if header is None or header == self.header:
                break
            # otherwise written with another column set: try the next suffix
        fresh = header is None
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        except OSError as exc:
            raise _storage_error(exc, path) from exc
        if fresh:
            try:
                _write_all(fd, self.header.encode())
            except OSError as exc:
                os.ftruncate(fd, 0)
                os.close(fd)
                raise _storage_error(exc, path) from exc
        self._fd, self.path, self._day, self.last_timestamp = fd, path, day, last

    def append(self, reading: Reading) -> int:
        """Write one row; return 1, or 0 if the timestamp would not increase."""
        day = utc_datetime(reading.timestamp).date()
        if day != self._day or self._fd is None:
            self._open(day)
        ts = format_utc(reading.timestamp, self.precision)
        if self.last_timestamp is not None and ts <= self.last_timestamp:
            log.warning("%s: dropping row at %s, not after %s", self.sensor_id, ts,
                        self.last_timestamp)
            return 0
        line = format_row(ts, self.columns, reading).encode()
        size = os.lseek(self._fd, 0, os.SEEK_END)
        try:
            _write_all(self._fd, line)
            if self.fsync:
                os.fsync(self._fd)
        except OSError as exc:
            try:
                os.ftruncate(self._fd, size)
            except OSError:
                pass
            raise _storage_error(exc, self.path) from exc
        self.last_timestamp = ts
        return 1

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
        self._fd = None
        self._day = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_reading(task, reading: Reading) -> int:
    """One-shot append of ``reading`` for ``task`` (opens and closes the file)."""
    if reading.sensor_id != task.sensor_id:
        raise ValueError(f"reading for {reading.sensor_id!r} passed to task {task.sensor_id!r}")
    with DailyCsvWriter(task.output_dir, task.sensor_id, task.columns,
                        task.timestamp_precision) as writer:
        return writer.append(reading)
