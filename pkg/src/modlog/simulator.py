"""In-memory RS-485 bus with virtual Modbus slaves and fault injection.

The request decoder and CRC here are written independently of
:mod:`modlog.modbus` on purpose: tests that round-trip through the bus must
not be able to pass because both sides share a bug.
"""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

from .modbus import check_slave_address

HOLDING = 0x03
INPUT = 0x04

WordPair = Tuple[int, int]
SeriesFn = Callable[[float], WordPair]


def _sim_crc_table() -> List[int]:
    out = []
    for n in range(256):
        reg = n
        for _ in range(8):
            carry = reg & 0x0001
            reg >>= 1
            if carry:
                reg ^= 0xA001
        out.append(reg)
    return out


_TABLE = _sim_crc_table()


def _crc(data: bytes) -> int:
    reg = 0xFFFF
    for b in data:
        reg = _TABLE[(reg ^ b) & 0xFF] ^ (reg >> 8)
    return reg


def _seal(body: bytes) -> bytes:
    c = _crc(body)
    return body + bytes((c & 0xFF, (c >> 8) & 0xFF))


class AddressInUse(Exception):
    pass


class FaultKind(enum.Enum):
    RESPOND = "respond"
    DROP = "drop"
    CORRUPT_CRC = "corrupt_crc"
    EXCEPTION = "exception"
    DELAY = "delay"
    RAW = "raw"


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    code: int = 0
    delay_ms: float = 0.0
    payload: bytes = b""

    @classmethod
    def exception(cls, code: int) -> "Fault":
        return cls(FaultKind.EXCEPTION, code=code)

    @classmethod
    def delay(cls, ms: float) -> "Fault":
        return cls(FaultKind.DELAY, delay_ms=ms)

    @classmethod
    def raw(cls, payload: bytes) -> "Fault":
        """Answer with ``payload`` verbatim (fuzzing hook)."""
        return cls(FaultKind.RAW, payload=bytes(payload))


RESPOND = Fault(FaultKind.RESPOND)
DROP = Fault(FaultKind.DROP)
CORRUPT_CRC = Fault(FaultKind.CORRUPT_CRC)


@dataclass
class FaultProfile:
    """Ordered script of behaviours consumed one per request.

    Once the script is exhausted the slave responds normally, unless
    ``cycle`` is set, in which case the script repeats.
    """

    script: List[Fault] = field(default_factory=list)
    cycle: bool = False
    cursor: int = 0

    def next(self) -> Fault:
        if not self.script:
            return RESPOND
        if self.cursor >= len(self.script):
            if not self.cycle:
                return RESPOND
            self.cursor = 0
        fault = self.script[self.cursor]
        self.cursor += 1
        return fault

    @classmethod
    def random(cls, length: int, drop: float = 0.0, corrupt_crc: float = 0.0,
               seed: Optional[int] = None, cycle: bool = False) -> "FaultProfile":
        rng = random.Random(seed)
        script = []
        for _ in range(length):
            u = rng.random()
            if u < drop:
                script.append(DROP)
            elif u < drop + corrupt_crc:
                script.append(CORRUPT_CRC)
            else:
                script.append(RESPOND)
        return cls(script, cycle=cycle)


@dataclass
class VirtualSlave:
    address: int
    holding: Dict[int, int] = field(default_factory=dict)
    input: Dict[int, int] = field(default_factory=dict)
    faults: FaultProfile = field(default_factory=FaultProfile)
    series: Dict[Tuple[int, int], SeriesFn] = field(default_factory=dict)

    def __post_init__(self):
        check_slave_address(self.address)
        if self.faults is None:
            self.faults = FaultProfile()
        for bank in (self.holding, self.input):
            for reg, word in bank.items():
                if not 0 <= reg <= 0xFFFF:
                    raise ValueError(f"register {reg} outside 0..65535")
                if not 0 <= word <= 0xFFFF:
                    raise ValueError(f"register {reg} value {word} is not a 16-bit word")

    def bank(self, function: int) -> Dict[int, int]:
        return self.holding if function == HOLDING else self.input

    def load(self, function: int, start: int, words: Sequence[int]) -> None:
        bank = self.bank(int(function))
        for i, w in enumerate(words):
            bank[start + i] = w & 0xFFFF

    def set_register_series(self, register: int, fn: SeriesFn,
                            function: int = HOLDING) -> None:
        """Make ``register`` and ``register+1`` follow ``fn(elapsed_seconds)``."""
        if not 0 <= register <= 0xFFFE:
            raise ValueError(f"series register {register} outside 0..65534")
        self.series[(int(function), register)] = fn

    def read(self, function: int, start: int, count: int, elapsed: float) -> Optional[List[int]]:
        bank = self.bank(function)
        live = {}
        for (fn_code, reg), fn in self.series.items():
            if fn_code == function and reg + 1 >= start and reg < start + count:
                hi, lo = fn(elapsed)
                live[reg] = hi & 0xFFFF
                live[reg + 1] = lo & 0xFFFF
        words = []
        for reg in range(start, start + count):
            if reg in live:
                words.append(live[reg])
            elif reg in bank:
                words.append(bank[reg])
            else:
                return None
        return words


def set_register_series(slave: VirtualSlave, register: int, fn: SeriesFn,
                        function: int = HOLDING) -> None:
    slave.set_register_series(register, fn, function)


class BusEvent(NamedTuple):
    time: float
    direction: str  # "tx" master->slaves, "rx" slave->master
    frame: bytes


class VirtualBus:
    """Shared half-duplex medium; at most one slave per address."""

    def __init__(self, clock, name: str = "virtual", log_limit: Optional[int] = None):
        self.clock = clock
        self.name = name
        self.slaves: Dict[int, VirtualSlave] = {}
        self.write_log: List[BusEvent] = []
        self.log_limit = log_limit
        self.t0 = clock.now()

    def attach_slave(self, slave: VirtualSlave) -> None:
        if slave.address in self.slaves:
            raise AddressInUse(f"address {slave.address} already attached on {self.name}")
        self.slaves[slave.address] = slave

    def elapsed(self) -> float:
        return self.clock.now() - self.t0

    def _log(self, direction: str, frame: bytes) -> None:
        if self.log_limit is None or len(self.write_log) < self.log_limit:
            self.write_log.append(BusEvent(self.clock.now(), direction, frame))

    def respond(self, frame: bytes) -> Tuple[Optional[bytes], float]:
        """Process one request; return (reply or None, reply delay seconds)."""
        frame = bytes(frame)
        self._log("tx", frame)
        if len(frame) != 8 or _crc(frame) != 0:
            return None, 0.0
        address, function = frame[0], frame[1]
        slave = self.slaves.get(address)
        if slave is None:
            return None, 0.0
        start = (frame[2] << 8) | frame[3]
        count = (frame[4] << 8) | frame[5]
        fault = slave.faults.next()
        if fault.kind is FaultKind.DROP:
            return None, 0.0
        if fault.kind is FaultKind.RAW:
            self._log("rx", fault.payload)
            return fault.payload, 0.0
        if fault.kind is FaultKind.EXCEPTION:
            reply = _seal(bytes((address, function | 0x80, fault.code & 0xFF)))
        else:
            reply = self._normal_reply(slave, address, function, start, count)
        if fault.kind is FaultKind.CORRUPT_CRC:
            reply = reply[:-1] + bytes((reply[-1] ^ 0xFF,))
        delay = fault.delay_ms / 1000.0 if fault.kind is FaultKind.DELAY else 0.0
        self._log("rx", reply)
        return reply, delay

    def _normal_reply(self, slave: VirtualSlave, address: int, function: int,
                      start: int, count: int) -> bytes:
        if function not in (HOLDING, INPUT):
            return _seal(bytes((address, function | 0x80, 0x01)))
        if not 1 <= count <= 125 or start + count > 0x10000:
            return _seal(bytes((address, function | 0x80, 0x03)))
        words = slave.read(function, start, count, self.elapsed())
        if words is None:
            return _seal(bytes((address, function | 0x80, 0x02)))
        body = bytearray((address, function, 2 * count))
        for w in words:
            body.append(w >> 8)
            body.append(w & 0xFF)
        return _seal(bytes(body))

    def handle_request(self, frame: bytes) -> Optional[bytes]:
        return self.respond(frame)[0]


def attach_slave(bus: VirtualBus, slave: VirtualSlave) -> None:
    bus.attach_slave(slave)


def handle_request(bus: VirtualBus, frame: bytes) -> Optional[bytes]:
    return bus.handle_request(frame)


def transactions(log: Sequence[BusEvent]) -> List[Tuple[int, bool]]:
    """Pair up a write log into (slave address, answered) transactions.

    Raises ``AssertionError`` if a reply ever appears for a slave other than
    the one most recently addressed, i.e. if frames interleaved.
    """
    out: List[Tuple[int, bool]] = []
    pending: Optional[int] = None
    for event in log:
        if event.direction == "tx":
            if pending is not None:
                out.append((pending, False))
            pending = event.frame[0] if event.frame else None
        else:
            if pending is None or not event.frame or event.frame[0] != pending:
                raise AssertionError(f"reply at t={event.time} does not match the open request")
            out.append((pending, True))
            pending = None
    if pending is not None:
        out.append((pending, False))
    return out


__all__ = [
    "AddressInUse", "BusEvent", "CORRUPT_CRC", "DROP", "Fault", "FaultKind",
    "FaultProfile", "HOLDING", "INPUT", "RESPOND", "VirtualBus",
    "VirtualSlave", "attach_slave", "handle_request", "set_register_series",
    "transactions",
]
