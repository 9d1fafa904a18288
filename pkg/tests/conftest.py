import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modlog.clock import SimClock, parse_utc  # noqa: E402
from modlog.simulator import VirtualBus  # noqa: E402
from modlog.transport import SerialConfig, VirtualEndpoint  # noqa: E402

T0 = parse_utc("2025-03-01T00:00:00Z")
EXAMPLES = Path(__file__).resolve().parent.parent / "src" / "modlog" / "examples"


@pytest.fixture
def clock():
    return SimClock(T0)


@pytest.fixture
def bus(clock):
    return VirtualBus(clock, name="/dev/ttyAMA0")


@pytest.fixture
def endpoint(bus, clock):
    return VirtualEndpoint(SerialConfig(port="/dev/ttyAMA0", baud=19200), bus, clock)


# -- acceptance report ------------------------------------------------------

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    # several tests may share a criterion; it passes only if all of them do
    _, passed, details = _acceptance.get(number, (title, True, []))
    _acceptance[number] = (title, passed and report.passed, details + [detail] * bool(detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, passed, detail = _acceptance[number]
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
        if detail:
            line += f" ({'; '.join(detail)})"
        terminalreporter.write_line(line)
