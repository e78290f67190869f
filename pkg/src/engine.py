"""
Discrete-event core: virtual clock, totally ordered event queue and seeded
randomness streams.
"""
import heapq
import logging
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

from src.lib.errors import LivelockGuard, PastEvent

logger = logging.getLogger(__name__)


class EventKind(Enum):
    JOB_ARRIVAL = 'JobArrival'
    SCHED_ATTEMPT = 'SchedAttempt'
    ACQUISITION_TIMEOUT = 'AcquisitionTimeout'
    BACKOFF_EXPIRED = 'BackoffExpired'
    JOB_FINISH = 'JobFinish'
    FAILURE_FIRED = 'FailureFired'
    PREEMPT_CHECK = 'PreemptCheck'
    UTILIZATION_SAMPLE = 'UtilizationSample'
    MIGRATION_CHECK = 'MigrationCheck'

    def __str__(self):
        return self.value


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int = field(default=-1)
    kind: EventKind = field(default=EventKind.SCHED_ATTEMPT, compare=False)
    job_id: Optional[str] = field(default=None, compare=False)
    payload: Any = field(default=None, compare=False)
    # segment token of the job when the event was scheduled; stale events are dropped
    token: int = field(default=0, compare=False)


class EventQueue:
    def __init__(self):
        self._heap = []
        self._seq = 0
        self._now = 0.0

    def __len__(self):
        return len(self._heap)

    def now(self):
        return self._now

    def schedule(self, ev: SimEvent):
        if ev.time < self._now:
            raise PastEvent(f"{ev.kind} at {ev.time} is before the clock ({self._now})")
        ev.seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> SimEvent:
        ev = heapq.heappop(self._heap)
        self._now = ev.time
        return ev

    def peek_time(self):
        return self._heap[0].time if self._heap else None


class RngStreams:
    """
    Named numpy substreams derived from one master seed.

    A stream is keyed by a concern name plus optional keys (a job id, an
    attempt index), so draws for one concern never depend on how many draws
    another concern made.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}

    @staticmethod
    def _spawn_key(name, keys):
        return tuple(zlib.crc32(str(part).encode('utf8')) for part in (name,) + tuple(keys))

    def get(self, name, *keys) -> np.random.Generator:
        spawn_key = self._spawn_key(name, keys)
        if spawn_key not in self._streams:
            self._streams[spawn_key] = self.fresh(name, *keys)
        return self._streams[spawn_key]

    def fresh(self, name, *keys) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=self._spawn_key(name, keys)))


def run(world, max_events, stop=None):
    """
    Drive `world` until its queue drains.

    :param world: object with `queue` (EventQueue), `dispatch(ev)` and `report()`
    :param max_events: LivelockGuard is raised when more events than this are dispatched
    :param stop: optional predicate on the world, checked after every event
    """
    dispatched = 0
    queue = world.queue
    last_time = queue.now()
    while len(queue):
        ev = queue.pop()
        if ev.time < last_time:
            raise PastEvent(f"clock went backwards at {ev.kind}")
        last_time = ev.time
        dispatched += 1
        if dispatched > max_events:
            raise LivelockGuard(f"more than {max_events} events dispatched, last {ev.kind} at t={ev.time}")
        world.dispatch(ev)
        if stop is not None and stop(world):
            logger.debug(f"Stop predicate met at t={ev.time}")
            break
    world.events_dispatched = dispatched
    return world.report()
