"""Injectable clocks.

Everything that waits or timestamps takes a clock so that timing behaviour
can be driven deterministically in tests.  Times are float seconds since the
Unix epoch (UTC).
"""
from __future__ import annotations

import threading
import time
from datetime import datetime, timezone
from typing import Optional


class SystemClock:
    virtual = False

    def now(self) -> float:
        return time.time()

    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def wait(self, stop: threading.Event, seconds: float) -> bool:
        """Sleep up to ``seconds``; return True early if ``stop`` is set."""
        if seconds <= 0:
            return stop.is_set()
        return stop.wait(seconds)


class SimClock:
    """Simulated time that only moves when someone sleeps on it.

    Not thread-safe by design; a simulated run is driven from one thread.
    """

    virtual = True

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def monotonic(self) -> float:
        return self._t

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._t += seconds

    def advance_to(self, t: float) -> None:
        if t > self._t:
            self.sleep(t - self._t)

    def wait(self, stop: threading.Event, seconds: float) -> bool:
        if stop.is_set():
            return True
        self.sleep(seconds)
        return stop.is_set()


def utc_datetime(t: float) -> datetime:
    return datetime.fromtimestamp(t, tz=timezone.utc)


def parse_utc(text: str) -> float:
    """Parse an ISO 8601 instant (``Z`` or offset; naive means UTC)."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_utc(t: float, precision: str = "s") -> str:
    """ISO 8601 with ``Z`` suffix; ``precision`` is ``s`` or ``ms``."""
    dt = utc_datetime(t)
    if precision == "ms":
        return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def as_clock(clock: Optional[object]):
    return SystemClock() if clock is None else clock
