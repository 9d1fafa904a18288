"""The polling service: fixed-rate ticks per sensor, one bus owner per port."""
from __future__ import annotations

import heapq
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

from ..clock import as_clock, format_utc
from ..drivers import Reading, ReadingStatus, failed_reading, read_sensor
from ..transport import Endpoint, SerialConfig, TransportError, open_endpoint
from .csvfile import DailyCsvWriter, StorageError
from .metadata import write_metadata
from .task import LoggingTask

log = logging.getLogger(__name__)

Opener = Callable[[SerialConfig, object], Endpoint]


def default_opener(config: SerialConfig, clock) -> Endpoint:
    return open_endpoint(config, None, clock)


@dataclass
class TaskSummary:
    sensor_id: str
    ticks: int = 0
    ok: int = 0
    partial: int = 0
    failed: int = 0
    missed: int = 0
    rows: int = 0
    skipped_rows: int = 0
    storage_errors: int = 0
    last_error: Optional[str] = None


@dataclass
class RunSummary:
    started_at: float
    stopped_at: float = 0.0
    tasks: Dict[str, TaskSummary] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "started_at": format_utc(self.started_at, "ms"),
            "stopped_at": format_utc(self.stopped_at, "ms"),
            "tasks": [asdict(t) for t in self.tasks.values()],
        }


class BusCoordinator:
    """Owns the endpoint of one port and serialises every transaction on it.

    Opening is lazy and retried on the next tick after a failure, so an
    unplugged adapter only costs failed rows, not the service.
    """

    def __init__(self, port: str, serial: SerialConfig, opener: Opener, clock):
        self.port = port
        self.serial = serial
        self.opener = opener
        self.clock = clock
        self.lock = threading.Lock()
        self._endpoint: Optional[Endpoint] = None

    def endpoint(self) -> Endpoint:
        if self._endpoint is None or self._endpoint.closed:
            self._endpoint = self.opener(self.serial, self.clock)
        return self._endpoint

    def close(self) -> None:
        if self._endpoint is not None:
            self._endpoint.close()
            self._endpoint = None


class _TaskRunner:
    def __init__(self, task: LoggingTask, coordinator: BusCoordinator, start: float,
                 clock, order: int, fsync: bool):
        self.task = task
        self.coordinator = coordinator
        self.start = start
        self.clock = clock
        self.order = order
        self.k = 0
        self.summary = TaskSummary(task.sensor_id)
        self.writer = DailyCsvWriter(task.output_dir, task.sensor_id, task.columns,
                                     task.timestamp_precision, fsync)

    def due(self, k: Optional[int] = None) -> float:
        return self.start + (self.k if k is None else k) * self.task.interval

    def catch_up(self, now: float) -> None:
        """Skip ticks whose successor is already due; never replay them."""
        if now >= self.due(self.k + 1):
            latest = int(math.floor((now - self.start) / self.task.interval))
            while self.due(latest) > now:  # float guard
                latest -= 1
            self.summary.missed += latest - self.k
            self.k = latest

    def tick(self) -> None:
        task = self.task
        with self.coordinator.lock:
            try:
                endpoint = self.coordinator.endpoint()
            except TransportError as exc:
                reading = failed_reading(task.sensor_id, self.clock.now(),
                                         f"{type(exc).__name__}: {exc}")
            else:
                reading = read_sensor(task.descriptor, endpoint, task.slave, task.retry,
                                      self.clock, task.sensor_id)
                if endpoint.closed:
                    self.coordinator.close()
        self._record(reading)
        self.k += 1

    def _record(self, reading: Reading) -> None:
        s = self.summary
        s.ticks += 1
        if reading.status is ReadingStatus.OK:
            s.ok += 1
        elif reading.status is ReadingStatus.PARTIAL:
            s.partial += 1
        else:
            s.failed += 1
        if reading.error_detail:
            s.last_error = reading.error_detail
        try:
            written = self.writer.append(reading)
        except StorageError as exc:
            s.storage_errors += 1
            s.last_error = str(exc)
            log.error("%s: %s", self.task.sensor_id, exc)
            return
        s.rows += written
        s.skipped_rows += 1 - written


class _Schedule:
    def __init__(self, runners: List[_TaskRunner], clock, stop: threading.Event,
                 end: Optional[float]):
        self.heap = [(r.due(), r.order, r) for r in runners]
        heapq.heapify(self.heap)
        self.clock = clock
        self.stop = stop
        self.end = end

    def next_due(self) -> Optional[float]:
        if not self.heap:
            return None
        due = self.heap[0][0]
        if self.end is not None and due >= self.end:
            return None
        return due

    def run_next(self) -> None:
        _, _, runner = heapq.heappop(self.heap)
        runner.catch_up(self.clock.now())
        if self.end is None or runner.due() < self.end:
            try:
                runner.tick()
            except Exception:  # keep the loop alive whatever a tick does
                log.exception("%s: tick failed", runner.task.sensor_id)
                runner.k += 1
        heapq.heappush(self.heap, (runner.due(), runner.order, runner))

    def run(self) -> None:
        while not self.stop.is_set():
            due = self.next_due()
            if due is None:
                return
            if self.clock.wait(self.stop, due - self.clock.now()):
                return
            self.run_next()


def group_by_port(tasks: List[LoggingTask]) -> Dict[str, List[LoggingTask]]:
    groups: Dict[str, List[LoggingTask]] = {}
    for t in tasks:
        groups.setdefault(t.port, []).append(t)
    return groups


def run_logging_service(tasks: List[LoggingTask], clock=None,
                        stop: Optional[threading.Event] = None, *,
                        opener: Opener = default_opener,
                        duration: Optional[float] = None,
                        fsync: bool = False,
                        write_meta: bool = True) -> RunSummary:
    """Poll ``tasks`` until ``stop`` is set or ``duration`` seconds pass.

    Tick ``k`` of every task is due at ``start + k * interval``.  With a
    virtual clock all ports are driven from this thread in due order; with
    the system clock each port gets its own thread.
    """
    clock = as_clock(clock)
    stop = stop or threading.Event()
    start = clock.now()
    end = None if duration is None else start + duration
    summary = RunSummary(started_at=start)

    coordinators: Dict[str, BusCoordinator] = {}
    runners: List[_TaskRunner] = []
    for order, task in enumerate(tasks):
        coord = coordinators.get(task.port)
        if coord is None:
            coord = coordinators[task.port] = BusCoordinator(task.port, task.serial, opener, clock)
        if write_meta:
            try:
                write_metadata(task, task.descriptor, clock)
            except OSError as exc:
                log.error("%s: cannot write metadata: %s", task.sensor_id, exc)
        runner = _TaskRunner(task, coord, start, clock, order, fsync)
        runners.append(runner)
        summary.tasks[task.sensor_id] = runner.summary
        log.info("%s: %s slave %d on %s every %g s", task.sensor_id, task.sensor_type,
                 task.slave, task.port, task.interval)

    try:
        if getattr(clock, "virtual", False):
            _Schedule(runners, clock, stop, end).run()
        else:
            threads = []
            for port in coordinators:
                mine = [r for r in runners if r.task.port == port]
                th = threading.Thread(target=_Schedule(mine, clock, stop, end).run,
                                      name=f"bus:{port}", daemon=True)
                th.start()
                threads.append(th)
            for th in threads:
                th.join()
    finally:
        for r in runners:
            r.writer.close()
        for c in coordinators.values():
            c.close()
    summary.stopped_at = clock.now()
    return summary
