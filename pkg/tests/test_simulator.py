import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modlog.clock import SimClock
from modlog.modbus import (
    DataType,
    FunctionCode,
    InvalidAddress,
    ModbusException,
    RequestPdu,
    ValueCodec,
    build_read_request,
    parse_response,
    with_crc,
)
from modlog.simulator import (
    CORRUPT_CRC,
    DROP,
    RESPOND,
    AddressInUse,
    Fault,
    FaultProfile,
    VirtualBus,
    VirtualSlave,
    set_register_series,
)

HOLDING = FunctionCode.READ_HOLDING_REGISTERS
INPUT = FunctionCode.READ_INPUT_REGISTERS
F32 = ValueCodec(DataType.FLOAT32)


def test_attach_two_addresses(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 1}))
    bus.attach_slave(VirtualSlave(2, holding={0: 2}))
    for a in (1, 2):
        pdu = RequestPdu(a, HOLDING, 0, 1)
        assert parse_response(bus.handle_request(build_read_request(pdu)), pdu).words == (a,)


def test_attach_duplicate_address(bus):
    bus.attach_slave(VirtualSlave(1))
    with pytest.raises(AddressInUse):
        bus.attach_slave(VirtualSlave(1))


def test_attach_address_zero_rejected():
    with pytest.raises(InvalidAddress):
        VirtualSlave(0)


def test_preloaded_words_returned_exactly(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 0x41C8, 1: 0x0000}))
    pdu = RequestPdu(1, HOLDING, 0, 2)
    assert parse_response(bus.handle_request(build_read_request(pdu)), pdu).words == (0x41C8, 0)


def test_bad_crc_frame_is_ignored(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 1}))
    frame = bytearray(build_read_request(RequestPdu(1, HOLDING, 0, 1)))
    frame[-1] ^= 0x55
    assert bus.handle_request(bytes(frame)) is None


def test_unattached_address_is_silent(bus):
    assert bus.handle_request(build_read_request(RequestPdu(9, HOLDING, 0, 1))) is None


def test_unpopulated_register_gives_illegal_address(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 1}))
    pdu = RequestPdu(1, HOLDING, 0, 2)
    with pytest.raises(ModbusException) as info:
        parse_response(bus.handle_request(build_read_request(pdu)), pdu)
    assert info.value.raw_code == 0x02


def test_holding_and_input_banks_are_separate(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 1}, input={0: 2}))
    pdu = RequestPdu(1, INPUT, 0, 1)
    assert parse_response(bus.handle_request(build_read_request(pdu)), pdu).words == (2,)


def test_unsupported_function_gives_illegal_function(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 1}))
    reply = bus.handle_request(with_crc(bytes([1, 0x06, 0, 0, 0, 1])))
    assert reply[1] == 0x86 and reply[2] == 0x01


def test_drop_then_respond(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 7}, faults=FaultProfile([DROP, RESPOND])))
    frame = build_read_request(RequestPdu(1, HOLDING, 0, 1))
    assert bus.handle_request(frame) is None
    assert bus.handle_request(frame) is not None


def test_exception_fault(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 7}, faults=FaultProfile([Fault.exception(4)])))
    reply = bus.handle_request(build_read_request(RequestPdu(1, HOLDING, 0, 1)))
    assert reply[1] == 0x83 and reply[2] == 0x04


def test_corrupt_fault_flips_final_byte(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 7}, faults=FaultProfile([CORRUPT_CRC])))
    frame = build_read_request(RequestPdu(1, HOLDING, 0, 1))
    bad = bus.handle_request(frame)
    good = bus.handle_request(frame)
    assert bad[:-1] == good[:-1] and bad[-1] != good[-1]


def test_delay_fault_reports_delay(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 7}, faults=FaultProfile([Fault.delay(250)])))
    reply, delay = bus.respond(build_read_request(RequestPdu(1, HOLDING, 0, 1)))
    assert reply is not None and delay == 0.25


def test_empty_script_always_responds():
    assert all(FaultProfile().next() is RESPOND for _ in range(5))


def test_cycling_script():
    p = FaultProfile([DROP, RESPOND], cycle=True)
    assert [p.next().kind.value for _ in range(4)] == ["drop", "respond", "drop", "respond"]


def _replies(seed):
    clock = SimClock(0)
    bus = VirtualBus(clock)
    bus.attach_slave(VirtualSlave(1, holding={0: 7}, faults=FaultProfile.random(
        200, drop=0.2, corrupt_crc=0.2, seed=seed)))
    frame = build_read_request(RequestPdu(1, HOLDING, 0, 1))
    return [bus.handle_request(frame) for _ in range(200)]


def test_fault_determinism():
    assert _replies(42) == _replies(42)
    assert _replies(42) != _replies(43)


def test_random_profile_rates():
    p = FaultProfile.random(20000, drop=0.10, corrupt_crc=0.05, seed=0)
    kinds = [f.kind.value for f in p.script]
    assert kinds.count("drop") / 20000 == pytest.approx(0.10, abs=0.01)
    assert kinds.count("corrupt_crc") / 20000 == pytest.approx(0.05, abs=0.01)


def test_series_constant(bus, clock):
    slave = VirtualSlave(1)
    set_register_series(slave, 0, lambda t: F32.encode(25.0))
    bus.attach_slave(slave)
    pdu = RequestPdu(1, HOLDING, 0, 2)
    for _ in range(5):
        clock.sleep(17)
        words = parse_response(bus.handle_request(build_read_request(pdu)), pdu).words
        assert F32.raw(words) == 25.0


def test_series_step_at_30s(bus, clock):
    slave = VirtualSlave(1)
    slave.set_register_series(0, lambda t: F32.encode(25.0 if t < 30 else 30.0))
    bus.attach_slave(slave)
    pdu = RequestPdu(1, HOLDING, 0, 2)
    seen = []
    for _ in range(6):
        seen.append(F32.raw(parse_response(bus.handle_request(build_read_request(pdu)), pdu).words))
        clock.sleep(10)
    assert seen == [25.0, 25.0, 25.0, 30.0, 30.0, 30.0]


def test_series_is_local(bus, clock):
    slave = VirtualSlave(1, holding={10: 0x1234})
    slave.set_register_series(0, lambda t: (int(t) & 0xFFFF, 0))
    bus.attach_slave(slave)
    pdu = RequestPdu(1, HOLDING, 10, 1)
    for _ in range(3):
        clock.sleep(5)
        assert parse_response(bus.handle_request(build_read_request(pdu)), pdu).words == (0x1234,)


def test_write_log_records_both_directions(bus):
    bus.attach_slave(VirtualSlave(1, holding={0: 1}))
    bus.handle_request(build_read_request(RequestPdu(1, HOLDING, 0, 1)))
    bus.handle_request(build_read_request(RequestPdu(2, HOLDING, 0, 1)))
    assert [e.direction for e in bus.write_log] == ["tx", "rx", "tx"]


@settings(max_examples=300, deadline=None)
@given(
    bank=st.dictionaries(st.integers(0, 300), st.integers(0, 0xFFFF), min_size=1, max_size=200),
    address=st.integers(1, 247),
    function=st.sampled_from([HOLDING, INPUT]),
    data=st.data(),
)
def test_oracle_soundness(bank, address, function, data):
    clock = SimClock(0)
    bus = VirtualBus(clock)
    slave = VirtualSlave(address)
    slave.bank(int(function)).update(bank)
    bus.attach_slave(slave)
    start = data.draw(st.sampled_from(sorted(bank)))
    run = 0
    while start + run in bank and run < 125:
        run += 1
    count = data.draw(st.integers(1, run))
    pdu = RequestPdu(address, function, start, count)
    words = parse_response(bus.handle_request(build_read_request(pdu)), pdu).words
    assert list(words) == [bank[start + i] for i in range(count)]


@given(st.binary(max_size=40))
def test_silence_on_garbage(frame):
    clock = SimClock(0)
    bus = VirtualBus(clock)
    bus.attach_slave(VirtualSlave(1, holding={0: 1}))
    reply = bus.handle_request(frame)
    if reply is not None:
        # only a frame that is a genuine 8-byte request to slave 1 gets through
        assert len(frame) == 8 and frame[0] == 1


def test_scenario_rejects_unknown_keys():
    from modlog.scenario import ScenarioError, parse_scenario
    with pytest.raises(ScenarioError, match=r"buses\[0\]\.slaves\[0\].*adress"):
        parse_scenario("buses:\n  - port: /dev/x\n    slaves:\n      - {adress: 1}\n")


def test_scenario_series_and_faults():
    from modlog.scenario import parse_scenario
    sc = parse_scenario(
        "buses:\n  - port: /dev/x\n    slaves:\n      - address: 3\n"
        "        series: [{register: 0, kind: step, at: 30, before: 25.0, after: 30.0}]\n"
        "        faults: [drop, {exception: 4}, corrupt_crc, {delay_ms: 5}]\n")
    clock = SimClock(0)
    bus = sc.build(clock)["/dev/x"]
    pdu = RequestPdu(3, HOLDING, 0, 2)
    frame = build_read_request(pdu)
    assert bus.handle_request(frame) is None
    assert bus.handle_request(frame)[1] == 0x83
    assert bus.handle_request(frame) != bus.handle_request(frame)
    clock.sleep(31)
    assert F32.raw(parse_response(bus.handle_request(frame), pdu).words) == 30.0
