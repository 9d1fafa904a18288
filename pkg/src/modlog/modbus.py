"""Modbus RTU framing for the read-only register functions.

Frames are ``[slave, function, data..., crc_lo, crc_hi]``; the CRC is
CRC-16/MODBUS transmitted low byte first.  Only function codes 0x03 and
0x04 are supported since the logger never writes to a device.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Sequence, Tuple

MIN_SLAVE = 1
MAX_SLAVE = 247
MAX_READ_COUNT = 125
EXCEPTION_FLAG = 0x80


def _make_table() -> Tuple[int, ...]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ 0xA001 if crc & 1 else crc >> 1
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _make_table()


def crc16(payload: bytes) -> int:
    """CRC-16/MODBUS of ``payload`` (poly 0xA001 reflected, init 0xFFFF)."""
    crc = 0xFFFF
    table = _CRC_TABLE
    for byte in payload:
        crc = (crc >> 8) ^ table[(crc ^ byte) & 0xFF]
    return crc


def with_crc(payload: bytes) -> bytes:
    """Return ``payload`` followed by its CRC, low byte first."""
    crc = crc16(payload)
    return bytes(payload) + bytes((crc & 0xFF, crc >> 8))


class ModbusError(Exception):
    """Base class for every framing or decoding failure."""


class InvalidAddress(ModbusError, ValueError):
    pass


class FrameTooShort(ModbusError):
    pass


class CrcMismatch(ModbusError):
    def __init__(self, computed: int, received: int):
        super().__init__(f"CRC mismatch: computed 0x{computed:04X}, received 0x{received:04X}")
        self.computed = computed
        self.received = received


class SlaveMismatch(ModbusError):
    pass


class FunctionMismatch(ModbusError):
    pass


class ByteCountMismatch(ModbusError):
    pass


class ArityMismatch(ModbusError, ValueError):
    pass


class NonFiniteValue(ModbusError, ValueError):
    pass


class ExceptionCode(enum.IntEnum):
    ILLEGAL_FUNCTION = 0x01
    ILLEGAL_DATA_ADDRESS = 0x02
    ILLEGAL_DATA_VALUE = 0x03
    SLAVE_DEVICE_FAILURE = 0x04


class ModbusException(ModbusError):
    """A slave answered with an exception response."""

    def __init__(self, code: int, slave: int = 0, function: int = 0):
        self.raw_code = code
        self.slave = slave
        self.function = function
        try:
            self.code = ExceptionCode(code)
            name = self.code.name
        except ValueError:
            self.code = None
            name = "UNKNOWN"
        super().__init__(f"Modbus exception 0x{code:02X} ({name}) from slave {slave}")


class UnknownException(ModbusException):
    """Exception response with a code outside 0x01-0x04; raw byte kept."""


class FunctionCode(enum.IntEnum):
    READ_HOLDING_REGISTERS = 0x03
    READ_INPUT_REGISTERS = 0x04

    @classmethod
    def parse(cls, value) -> "FunctionCode":
        """Accept 3/4, the enum itself or names such as ``holding``/``input``."""
        if isinstance(value, FunctionCode):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            aliases = {
                "holding": cls.READ_HOLDING_REGISTERS,
                "read_holding_registers": cls.READ_HOLDING_REGISTERS,
                "input": cls.READ_INPUT_REGISTERS,
                "read_input_registers": cls.READ_INPUT_REGISTERS,
            }
            if key in aliases:
                return aliases[key]
            value = int(key, 0)
        return cls(int(value))

    @property
    def short_name(self) -> str:
        return "holding" if self is FunctionCode.READ_HOLDING_REGISTERS else "input"


def check_slave_address(value: int) -> int:
    """Validate a unicast slave address (1..247) and return it as int."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidAddress(f"slave address must be an integer, got {value!r}")
    if not MIN_SLAVE <= value <= MAX_SLAVE:
        raise InvalidAddress(f"slave address {value} outside {MIN_SLAVE}..{MAX_SLAVE}")
    return value


@dataclass(frozen=True)
class RequestPdu:
    slave: int
    function: FunctionCode
    start_register: int
    register_count: int

    def __post_init__(self):
        check_slave_address(self.slave)
        object.__setattr__(self, "function", FunctionCode(self.function))
        if not 0 <= self.start_register <= 0xFFFF:
            raise ValueError(f"start register {self.start_register} outside 0..65535")
        if not 1 <= self.register_count <= MAX_READ_COUNT:
            raise ValueError(f"register count {self.register_count} outside 1..{MAX_READ_COUNT}")
        if self.start_register + self.register_count > 0x10000:
            raise ValueError("register range runs past 65535")

    @property
    def response_length(self) -> int:
        """Length of a normal (non-exception) response frame."""
        return 5 + 2 * self.register_count


@dataclass(frozen=True)
class ResponsePdu:
    slave: int
    function: FunctionCode
    words: Tuple[int, ...]


def build_read_request(pdu: RequestPdu) -> bytes:
    """Encode ``pdu`` as the 8-byte RTU request frame."""
    head = struct.pack(">BBHH", pdu.slave, pdu.function, pdu.start_register, pdu.register_count)
    return with_crc(head)


def parse_response(frame: bytes, expected: RequestPdu) -> ResponsePdu:
    """Validate ``frame`` as the answer to ``expected`` and decode its words.

    Checks run in a fixed order: length, CRC, slave, function (an exception
    response raises :class:`ModbusException`), then byte count.
    """
    frame = bytes(frame)
    if len(frame) < 5:
        raise FrameTooShort(f"frame of {len(frame)} bytes, need at least 5")
    if crc16(frame) != 0:
        computed = crc16(frame[:-2])
        received = frame[-2] | (frame[-1] << 8)
        raise CrcMismatch(computed, received)
    slave, function = frame[0], frame[1]
    if slave != expected.slave:
        raise SlaveMismatch(f"response from slave {slave}, expected {expected.slave}")
    if function == expected.function | EXCEPTION_FLAG:
        code = frame[2]
        cls = ModbusException if 1 <= code <= 4 else UnknownException
        raise cls(code, slave, int(expected.function))
    if function != expected.function:
        raise FunctionMismatch(f"function 0x{function:02X}, expected 0x{int(expected.function):02X}")
    byte_count = frame[2]
    if byte_count != 2 * expected.register_count or len(frame) != 5 + byte_count:
        raise ByteCountMismatch(
            f"byte count {byte_count} in {len(frame)}-byte frame, "
            f"expected {2 * expected.register_count}"
        )
    words = struct.unpack(f">{expected.register_count}H", frame[3:3 + byte_count])
    return ResponsePdu(slave, expected.function, words)


class DataType(enum.Enum):
    U16 = "u16"
    S16 = "s16"
    U32 = "u32"
    S32 = "s32"
    FLOAT32 = "float32"

    @property
    def word_count(self) -> int:
        return 1 if self in (DataType.U16, DataType.S16) else 2


class WordOrder(enum.Enum):
    HIGH_WORD_FIRST = "high_word_first"
    LOW_WORD_FIRST = "low_word_first"


_STRUCT_CODES = {
    DataType.U16: "H",
    DataType.S16: "h",
    DataType.U32: "I",
    DataType.S32: "i",
    DataType.FLOAT32: "f",
}


@dataclass(frozen=True)
class ValueCodec:
    """How a run of registers becomes a number: reinterpret, then scale and offset."""

    datatype: DataType = DataType.FLOAT32
    word_order: WordOrder = WordOrder.HIGH_WORD_FIRST
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "datatype", DataType(self.datatype))
        object.__setattr__(self, "word_order", WordOrder(self.word_order))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "offset", float(self.offset))
        if self.scale == 0:
            raise ValueError("scale must be non-zero")

    @property
    def word_count(self) -> int:
        return self.datatype.word_count

    def _ordered(self, words: Sequence[int]) -> Sequence[int]:
        if self.word_order is WordOrder.LOW_WORD_FIRST and len(words) == 2:
            return (words[1], words[0])
        return words

    def raw(self, words: Sequence[int]) -> float:
        """Reinterpret ``words`` per datatype without scale/offset."""
        if len(words) != self.word_count:
            raise ArityMismatch(
                f"{self.datatype.value} needs {self.word_count} word(s), got {len(words)}"
            )
        ordered = self._ordered(words)
        packed = struct.pack(f">{len(ordered)}H", *(w & 0xFFFF for w in ordered))
        return struct.unpack(">" + _STRUCT_CODES[self.datatype], packed)[0]

    def encode(self, value: float) -> Tuple[int, ...]:
        """Inverse of :func:`decode_value`; used to script register banks."""
        raw = (value - self.offset) / self.scale
        if self.datatype is not DataType.FLOAT32:
            raw = int(round(raw))
        packed = struct.pack(">" + _STRUCT_CODES[self.datatype], raw)
        words = struct.unpack(f">{self.word_count}H", packed)
        return tuple(self._ordered(words))


def decode_value(words: Sequence[int], codec: ValueCodec) -> float:
    """Turn register ``words`` into a measurement value."""
    raw = codec.raw(words)
    if codec.datatype is DataType.FLOAT32 and not math.isfinite(raw):
        raise NonFiniteValue(f"register pattern decodes to {raw}")
    return raw * codec.scale + codec.offset
