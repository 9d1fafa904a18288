"""Read every mapping of one sensor into a :class:`Reading`."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Tuple

from ..clock import as_clock, format_utc, utc_datetime
from ..modbus import (
    MAX_READ_COUNT,
    ModbusException,
    RequestPdu,
    build_read_request,
    decode_value,
    parse_response,
)
from ..transport import Endpoint, RetryPolicy
from .descriptor import DriverDescriptor, RegisterMapping

log = logging.getLogger(__name__)


class ReadingStatus(enum.Enum):
    OK = "ok"
    PARTIAL = "partial"
    FAILED = "failed"


@dataclass
class Reading:
    sensor_id: str
    timestamp: float
    values: Dict[str, Tuple[float, str]] = field(default_factory=dict)
    status: ReadingStatus = ReadingStatus.OK
    error_detail: Optional[str] = None

    @property
    def time(self) -> datetime:
        return utc_datetime(self.timestamp)

    @property
    def iso_timestamp(self) -> str:
        return format_utc(self.timestamp)


def failed_reading(sensor_id: str, timestamp: float, detail: str) -> Reading:
    return Reading(sensor_id, timestamp, {}, ReadingStatus.FAILED, detail)


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def _blocks(mappings) -> List[List[RegisterMapping]]:
    """Group mappings whose registers are exactly adjacent on one function.

    Only gap-free runs are merged, so a block never touches a register the
    descriptor does not name.
    """
    blocks: List[List[RegisterMapping]] = []
    for m in mappings:
        if blocks:
            last = blocks[-1]
            tail = last[-1]
            span = m.register_range.stop - last[0].start_register
            if (m.function == tail.function and m.start_register == tail.register_range.stop
                    and span <= MAX_READ_COUNT):
                last.append(m)
                continue
        blocks.append([m])
    return blocks


def _read_block(block, endpoint: Endpoint, slave: int, policy: RetryPolicy):
    first = block[0]
    count = block[-1].register_range.stop - first.start_register
    pdu = RequestPdu(slave, first.function, first.start_register, count)
    words = parse_response(endpoint.transact(build_read_request(pdu), policy), pdu).words
    return {m.name: words[m.start_register - first.start_register:
                          m.register_range.stop - first.start_register] for m in block}


def read_sensor(d: DriverDescriptor, endpoint: Endpoint, slave: int,
                policy: RetryPolicy = RetryPolicy(), clock=None,
                sensor_id: Optional[str] = None) -> Reading:
    """Poll every mapping once; failures degrade the status, never raise.

    Adjacent registers are fetched in one request.  If such a merged request
    draws an exception reply, its mappings are retried one by one so a single
    bad register cannot hide its neighbours.  The reading is stamped when the
    first request goes out so all values of a multi-register sensor share
    one instant.
    """
    clock = as_clock(clock) if clock is not None else endpoint.clock
    sensor_id = sensor_id or d.sensor_type
    timestamp = None
    words: Dict[str, tuple] = {}
    errors: Dict[str, str] = {}
    for block in _blocks(d.mappings):
        try:
            if timestamp is None:
                endpoint.wait_for_bus()
                timestamp = clock.now()
            words.update(_read_block(block, endpoint, slave, policy))
            continue
        except ModbusException as exc:
            if len(block) == 1:
                errors[block[0].name] = _describe(exc)
                continue
        except Exception as exc:
            for m in block:
                errors[m.name] = _describe(exc)
            continue
        for m in block:
            try:
                words.update(_read_block([m], endpoint, slave, policy))
            except Exception as exc:
                errors[m.name] = _describe(exc)
    values: Dict[str, Tuple[float, str]] = {}
    for m in d.mappings:
        if m.name not in words:
            continue
        try:
            value = decode_value(words[m.name], m.codec)
            if m.transform is not None:
                value = float(m.transform(value))
            values[m.name] = (value, m.unit)
        except Exception as exc:
            errors[m.name] = _describe(exc)
    if timestamp is None:
        timestamp = clock.now()
    if not errors:
        return Reading(sensor_id, timestamp, values, ReadingStatus.OK)
    for name, detail in errors.items():
        log.debug("%s: %s failed: %s", sensor_id, name, detail)
    status = ReadingStatus.PARTIAL if values else ReadingStatus.FAILED
    detail = "; ".join(f"{m.name}: {errors[m.name]}" for m in d.mappings if m.name in errors)
    return Reading(sensor_id, timestamp, values, status, detail)
