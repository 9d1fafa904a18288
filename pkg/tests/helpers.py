"""Shared builders for logger/acceptance tests."""
import csv
import re
from pathlib import Path

from modlog.drivers import registry_lookup
from modlog.logger import LoggingTask
from modlog.modbus import DataType, ValueCodec
from modlog.simulator import VirtualSlave
from modlog.transport import RetryPolicy, SerialConfig, VirtualEndpoint

PORT = "/dev/ttyAMA0"
BUS_SERIAL = SerialConfig(port=PORT, baud=19200, stop_bits=2)
TS_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d{3})?Z$")


def make_task(sensor_id, sensor_type, slave, out, interval=1.0, retry=RetryPolicy(3, 200),
              **kw):
    return LoggingTask(
        sensor_id=sensor_id, sensor_type=sensor_type, slave=slave, port=PORT,
        serial=BUS_SERIAL, interval=interval, descriptor=registry_lookup(sensor_type),
        output_dir=Path(out), retry=retry, **kw)


def gmp_slave(address, value=1200.0, **kw):
    m = registry_lookup("gmp252").mapping("co2")
    return VirtualSlave(address, holding=dict(zip(m.register_range, m.codec.encode(value))), **kw)


def alpha_slave(address, **kw):
    f32 = ValueCodec(DataType.FLOAT32)
    regs = {}
    for i, v in enumerate((850.0, 9.5, 98.0, 962.0)):
        regs.update(zip((2 * i, 2 * i + 1), f32.encode(v)))
    return VirtualSlave(address, input=regs, **kw)


def bus_opener(bus):
    def opener(config, clock):
        return VirtualEndpoint(config, bus, clock)
    return opener


def read_rows(path):
    """Parse a daily CSV strictly; returns (header, rows)."""
    raw = Path(path).read_bytes()
    assert raw.endswith(b"\n"), f"{path}: partial trailing line"
    lines = raw.decode().split("\n")[:-1]
    header = lines[0].split(",")
    assert header[0] == "timestamp" and header[-2:] == ["status", "error"]
    rows = list(csv.reader(lines[1:]))
    for row in rows:
        assert len(row) == len(header), f"{path}: malformed row {row}"
        assert TS_RE.match(row[0]), row
        assert row[-2] in ("ok", "partial", "failed")
        assert not any(c == "timestamp" for c in row), "repeated header"
    stamps = [r[0] for r in rows]
    assert all(a < b for a, b in zip(stamps, stamps[1:])), f"{path}: timestamps not increasing"
    return header, rows
