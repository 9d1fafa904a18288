import os
import subprocess
import sys
import threading
import time
import tty

import pytest

from modlog.clock import SystemClock
from modlog.modbus import FunctionCode, RequestPdu, build_read_request, crc16, parse_response
from modlog.simulator import (
    CORRUPT_CRC,
    DROP,
    Fault,
    FaultProfile,
    VirtualBus,
    VirtualSlave,
    transactions,
)
from modlog.transport import (
    PortBusy,
    PortNotFound,
    RetryPolicy,
    SerialConfig,
    Timeout,
    TransportClosed,
    VirtualEndpoint,
    inter_frame_delay,
    open_endpoint,
)
from oracles import inter_frame_delay_us

HOLDING = FunctionCode.READ_HOLDING_REGISTERS


@pytest.mark.parametrize("baud,byte_size,parity,stop,expected", [
    (9600, 8, "even", 1, 4010),
    (19200, 8, "even", 1, 2005),
    (115200, 8, "none", 1, 1750),
    (38400, 7, "odd", 2, 1750),
])
def test_inter_frame_delay(baud, byte_size, parity, stop, expected):
    cfg = SerialConfig(baud=baud, byte_size=byte_size, parity=parity, stop_bits=stop)
    got = inter_frame_delay(cfg)
    assert round(got) == expected
    assert got == pytest.approx(inter_frame_delay_us(baud, byte_size, parity != "none", stop))


@pytest.mark.parametrize("kwargs", [
    dict(baud=14400),
    dict(byte_size=7, parity="none"),
    dict(stop_bits=3),
    dict(byte_size=6, parity="even"),
])
def test_serial_config_invariants(kwargs):
    with pytest.raises(ValueError):
        SerialConfig(**kwargs)


@pytest.mark.parametrize("attempts", [0, 11])
def test_retry_policy_bounds(attempts):
    with pytest.raises(ValueError):
        RetryPolicy(attempts=attempts)


def test_retry_policy_defaults():
    assert RetryPolicy() == RetryPolicy(attempts=3, timeout_ms=1000)


def _slave(address=1, words=(0x41C8, 0x0000), faults=None):
    s = VirtualSlave(address)
    s.load(3, 0, list(words))
    if faults is not None:
        s.faults = FaultProfile(list(faults))
    return s


def _request(slave=1, count=2):
    return build_read_request(RequestPdu(slave, HOLDING, 0, count))


def test_virtual_backend_always_opens(bus):
    ep = open_endpoint(SerialConfig(port="/dev/does-not-exist"), bus)
    assert isinstance(ep, VirtualEndpoint)


def test_real_backend_missing_port():
    with pytest.raises(PortNotFound, match="/dev/ttyNOPE9"):
        open_endpoint(SerialConfig(port="/dev/ttyNOPE9"))


def test_transact_round_trip(bus, endpoint):
    bus.attach_slave(_slave())
    reply = endpoint.transact(_request(), RetryPolicy(1, 100))
    assert parse_response(reply, RequestPdu(1, HOLDING, 0, 2)).words == (0x41C8, 0)


def test_absent_slave_times_out_after_all_attempts(bus, endpoint, clock):
    start = clock.now()
    with pytest.raises(Timeout):
        endpoint.transact(_request(5), RetryPolicy(attempts=3, timeout_ms=50))
    elapsed = clock.now() - start
    assert elapsed == pytest.approx(0.150, rel=0.20)


def test_corrupt_once_then_clean(bus, endpoint):
    bus.attach_slave(_slave(faults=[CORRUPT_CRC]))
    reply = endpoint.transact(_request(), RetryPolicy(attempts=2, timeout_ms=50))
    assert crc16(reply) == 0
    assert sum(1 for e in bus.write_log if e.direction == "tx") == 2


def test_all_corrupt_returns_last_reply_for_diagnosis(bus, endpoint):
    bus.attach_slave(_slave(faults=[CORRUPT_CRC] * 3))
    reply = endpoint.transact(_request(), RetryPolicy(attempts=3, timeout_ms=50))
    assert crc16(reply) != 0


@pytest.mark.parametrize("attempts", [1, 2, 3, 7, 10])
def test_retry_count_with_always_dropping_slave(bus, endpoint, attempts):
    bus.attach_slave(_slave(faults=[DROP] * 20))
    with pytest.raises(Timeout):
        endpoint.transact(_request(), RetryPolicy(attempts=attempts, timeout_ms=10))
    assert sum(1 for e in bus.write_log if e.direction == "tx") == attempts


def test_delay_within_timeout_is_answered(bus, endpoint, clock):
    bus.attach_slave(_slave(faults=[Fault.delay(30)]))
    t = clock.now()
    endpoint.transact(_request(), RetryPolicy(attempts=1, timeout_ms=50))
    assert clock.now() - t >= 0.030 - 1e-6


def test_delay_beyond_timeout_counts_as_timeout(bus, endpoint):
    bus.attach_slave(_slave(faults=[Fault.delay(80), Fault.delay(80)]))
    with pytest.raises(Timeout):
        endpoint.transact(_request(), RetryPolicy(attempts=2, timeout_ms=50))


def test_silent_interval_between_writes(bus, clock):
    cfg = SerialConfig(baud=9600, parity="even")
    ep = VirtualEndpoint(cfg, bus, clock)
    bus.attach_slave(_slave())
    for _ in range(20):
        ep.transact(_request(), RetryPolicy(1, 50))
    writes = [e.time for e in bus.write_log if e.direction == "tx"]
    replies = [e.time for e in bus.write_log if e.direction == "rx"]
    gap = inter_frame_delay(cfg) / 1e6
    for reply_t, next_write in zip(replies, writes[1:]):
        assert next_write - reply_t >= gap - 1e-9


def test_closed_endpoint(bus, endpoint):
    endpoint.close()
    with pytest.raises(TransportClosed):
        endpoint.transact(_request(), RetryPolicy(1, 10))


def test_concurrent_transacts_never_interleave():
    """Threads hammer one endpoint on a real clock; the log must pair up."""
    clock = SystemClock()
    bus = VirtualBus(clock)
    for a in (1, 2, 3):
        s = _slave(a, faults=[Fault.delay(1), DROP] * 5)
        bus.attach_slave(s)
    ep = VirtualEndpoint(SerialConfig(baud=115200), bus, clock)
    errors = []

    def worker(address):
        for _ in range(15):
            try:
                ep.transact(_request(address), RetryPolicy(2, 3))
            except Timeout:
                pass
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)

    threads = [threading.Thread(target=worker, args=(a,)) for a in (1, 2, 3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    pairs = transactions(bus.write_log)  # raises on interleaving
    assert len(pairs) == sum(1 for e in bus.write_log if e.direction == "tx")


# -- real serial backend over a pseudo-terminal -----------------------------

@pytest.fixture
def pty_port():
    master, slave_fd = os.openpty()
    tty.setraw(master)
    path = os.ttyname(slave_fd)
    yield master, path
    os.close(master)
    os.close(slave_fd)


def _serve(master, bus, stop):
    while not stop.is_set():
        try:
            req = os.read(master, 256)
        except OSError:
            return
        reply = bus.handle_request(req)
        if reply:
            os.write(master, reply)


def test_real_backend_round_trip_over_pty(pty_port):
    master, path = pty_port
    bus = VirtualBus(SystemClock())
    bus.attach_slave(_slave())
    stop = threading.Event()
    threading.Thread(target=_serve, args=(master, bus, stop), daemon=True).start()
    with open_endpoint(SerialConfig(port=path, baud=19200)) as ep:
        pdu = RequestPdu(1, HOLDING, 0, 2)
        assert parse_response(ep.transact(build_read_request(pdu), RetryPolicy(1, 500)),
                              pdu).words == (0x41C8, 0)
        t = time.monotonic()
        with pytest.raises(Timeout):
            ep.transact(_request(9), RetryPolicy(2, 100))
        assert time.monotonic() - t == pytest.approx(0.2, rel=0.5)
    stop.set()


def test_second_open_same_port_is_busy(pty_port):
    _, path = pty_port
    with open_endpoint(SerialConfig(port=path)):
        with pytest.raises(PortBusy, match=path):
            open_endpoint(SerialConfig(port=path))
    # released after close
    open_endpoint(SerialConfig(port=path)).close()


def test_other_process_sees_port_busy(pty_port):
    _, path = pty_port
    code = (
        "import sys\n"
        "from modlog.transport import open_endpoint, SerialConfig, PortBusy\n"
        f"try:\n    open_endpoint(SerialConfig(port={path!r}))\n"
        "except PortBusy:\n    sys.exit(3)\n"
        "sys.exit(0)\n"
    )
    with open_endpoint(SerialConfig(port=path)):
        result = subprocess.run([sys.executable, "-c", code], timeout=30)
    assert result.returncode == 3
