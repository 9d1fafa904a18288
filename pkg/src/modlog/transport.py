"""Half-duplex request/response channel over a serial port or the virtual bus."""
from __future__ import annotations

import enum
import errno
import logging
import os
import threading
from dataclasses import dataclass
from typing import Optional, Union

from .clock import as_clock
from .modbus import EXCEPTION_FLAG, crc16

log = logging.getLogger(__name__)

VALID_BAUDS = (1200, 2400, 4800, 9600, 19200, 38400, 57600, 115200)


class Parity(enum.Enum):
    NONE = "none"
    EVEN = "even"
    ODD = "odd"

    @classmethod
    def parse(cls, value) -> "Parity":
        if isinstance(value, Parity):
            return value
        key = str(value).strip().lower()
        return {"n": cls.NONE, "e": cls.EVEN, "o": cls.ODD}.get(key) or cls(key)


@dataclass(frozen=True)
class SerialConfig:
    port: str = "/dev/ttyUSB0"
    baud: int = 9600
    parity: Parity = Parity.NONE
    stop_bits: int = 1
    byte_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "parity", Parity.parse(self.parity))
        if self.baud not in VALID_BAUDS:
            raise ValueError(f"baud {self.baud} not in {VALID_BAUDS}")
        if self.stop_bits not in (1, 2):
            raise ValueError(f"stop_bits must be 1 or 2, got {self.stop_bits}")
        if self.byte_size not in (7, 8):
            raise ValueError(f"byte_size must be 7 or 8, got {self.byte_size}")
        if self.byte_size == 7 and self.parity is Parity.NONE:
            raise ValueError("7 data bits require even or odd parity")

    @property
    def bits_per_char(self) -> int:
        return 1 + self.byte_size + (0 if self.parity is Parity.NONE else 1) + self.stop_bits

    def line_settings(self) -> tuple:
        """The parameters that must agree between devices sharing one bus."""
        return (self.baud, self.parity, self.stop_bits, self.byte_size)

    def describe(self) -> str:
        return f"{self.baud} {self.byte_size}{self.parity.value[0].upper()}{self.stop_bits}"


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    timeout_ms: float = 1000.0

    def __post_init__(self):
        if not 1 <= self.attempts <= 10:
            raise ValueError(f"attempts must be within 1..10, got {self.attempts}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")

    @property
    def timeout(self) -> float:
        return self.timeout_ms / 1000.0


def inter_frame_delay(config: SerialConfig) -> float:
    """Required bus silence between frames, in microseconds."""
    if config.baud > 19200:
        return 1750.0
    return 3.5 * config.bits_per_char / config.baud * 1e6


class TransportError(Exception):
    pass


class Timeout(TransportError, TimeoutError):
    pass


class TransportClosed(TransportError):
    pass


class PortNotFound(TransportError):
    pass


class PortBusy(TransportError):
    pass


class PermissionDenied(TransportError, PermissionError):
    pass


def expected_reply_length(request: bytes) -> int:
    """Normal-response length for a read request frame (exceptions are 5)."""
    count = (request[4] << 8) | request[5]
    return 5 + 2 * count


class Endpoint:
    """One open bus.  Use only from one task at a time; ``transact`` holds a
    lock across write and read so frames can never interleave."""

    def __init__(self, config: SerialConfig, clock=None):
        self.config = config
        self.clock = as_clock(clock)
        self.last_activity: Optional[float] = None
        self.closed = False
        self._lock = threading.Lock()
        self._gap = inter_frame_delay(config) / 1e6

    @property
    def backend_name(self) -> str:
        raise NotImplementedError

    def wait_for_bus(self) -> None:
        """Block until the inter-frame silence since the last frame has passed."""
        if self.last_activity is None:
            return
        remaining = self.last_activity + self._gap - self.clock.monotonic()
        if remaining > 0:
            self.clock.sleep(remaining)

    def transact(self, request: bytes, policy: RetryPolicy = RetryPolicy()) -> bytes:
        """Send ``request`` and return the first CRC-valid reply.

        A reply with a bad CRC or no reply at all is retried up to
        ``policy.attempts`` times.  If every attempt failed but something
        was received, the last (corrupt) reply is returned so the caller's
        parser can report exactly what went wrong.
        """
        if self.closed:
            raise TransportClosed(f"{self.config.port} is closed")
        with self._lock:
            corrupt = None
            for attempt in range(1, policy.attempts + 1):
                self.wait_for_bus()
                reply = self._exchange(request, policy.timeout)
                self.last_activity = self.clock.monotonic()
                if reply and crc16(reply) == 0:
                    return reply
                if reply:
                    corrupt = reply
                    log.debug("%s: corrupt reply on attempt %d: %s",
                              self.config.port, attempt, reply.hex())
                else:
                    log.debug("%s: no reply on attempt %d", self.config.port, attempt)
            if corrupt is not None:
                return corrupt
            raise Timeout(
                f"no reply from slave {request[0]} on {self.config.port} "
                f"after {policy.attempts} attempt(s) of {policy.timeout_ms:g} ms"
            )

    def _exchange(self, request: bytes, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class VirtualEndpoint(Endpoint):
    def __init__(self, config: SerialConfig, bus, clock=None):
        super().__init__(config, clock if clock is not None else bus.clock)
        self.bus = bus

    @property
    def backend_name(self) -> str:
        return f"virtual:{self.bus.name}"

    def _exchange(self, request: bytes, timeout: float) -> bytes:
        reply, delay = self.bus.respond(request)
        if reply is None or delay > timeout:
            self.clock.sleep(timeout)
            return b""
        self.clock.sleep(delay)
        return reply


_open_ports = set()
_open_ports_lock = threading.Lock()


class SerialEndpoint(Endpoint):
    def __init__(self, config: SerialConfig, clock=None):
        super().__init__(config, clock)
        import serial

        path = config.port
        if not os.path.exists(path):
            raise PortNotFound(f"serial port {path} does not exist")
        with _open_ports_lock:
            if path in _open_ports:
                raise PortBusy(f"serial port {path} is already open in this process")
            _open_ports.add(path)
        parity = {"none": serial.PARITY_NONE, "even": serial.PARITY_EVEN,
                  "odd": serial.PARITY_ODD}[config.parity.value]
        try:
            self._serial = serial.Serial(
                port=path,
                baudrate=config.baud,
                bytesize=config.byte_size,
                parity=parity,
                stopbits=config.stop_bits,
                timeout=1.0,
                exclusive=True,
            )
        except Exception as exc:
            with _open_ports_lock:
                _open_ports.discard(path)
            raise _classify_open_error(path, exc) from exc

    @property
    def backend_name(self) -> str:
        return "serial"

    def _read(self, n: int, deadline: float) -> bytes:
        buf = b""
        while len(buf) < n:
            remaining = deadline - self.clock.monotonic()
            if remaining <= 0:
                break
            self._serial.timeout = remaining
            chunk = self._serial.read(n - len(buf))
            if not chunk:
                break
            buf += chunk
        return buf

    def _exchange(self, request: bytes, timeout: float) -> bytes:
        try:
            self._serial.reset_input_buffer()
            self._serial.write(request)
            self._serial.flush()
            deadline = self.clock.monotonic() + timeout
            # An exception reply is 5 bytes, so read that much first and
            # only then decide how long the full frame is.
            head = self._read(5, deadline)
            if len(head) < 5 or head[1] & EXCEPTION_FLAG:
                return head
            return head + self._read(expected_reply_length(request) - 5, deadline)
        except Exception as exc:  # OSError, or SerialException on unplug
            self.close()
            raise TransportClosed(f"{self.config.port}: {exc}") from exc

    def close(self) -> None:
        if not self.closed:
            try:
                self._serial.close()
            finally:
                with _open_ports_lock:
                    _open_ports.discard(self.config.port)
        super().close()


def _classify_open_error(path: str, exc: Exception) -> TransportError:
    err = getattr(exc, "errno", None)
    text = str(exc)
    if isinstance(exc, PermissionError) or err in (errno.EACCES, errno.EPERM):
        return PermissionDenied(f"permission denied opening {path}: {text}")
    if err == errno.ENOENT or isinstance(exc, FileNotFoundError):
        return PortNotFound(f"serial port {path} does not exist")
    if err == errno.EBUSY or "exclusively lock" in text or "busy" in text.lower():
        return PortBusy(f"serial port {path} is busy: {text}")
    if "Permission denied" in text:
        return PermissionDenied(f"permission denied opening {path}: {text}")
    return PortBusy(f"cannot open {path}: {text}")


def open_endpoint(config: SerialConfig, backend: Union[None, str, object] = None,
                  clock=None) -> Endpoint:
    """Open ``config.port`` on a real serial device, or on ``backend`` when
    it is a :class:`~modlog.simulator.VirtualBus`."""
    if backend is None or backend == "serial":
        return SerialEndpoint(config, clock)
    return VirtualEndpoint(config, backend, clock)


def transact(endpoint: Endpoint, request: bytes, policy: RetryPolicy = RetryPolicy()) -> bytes:
    return endpoint.transact(request, policy)
