"""
The simulated world: cluster state, scheduler, event queue and everything the
run records for the report.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from src import settings
from src.cluster import AllocationState, ClusterTopology
from src.engine import EventKind, EventQueue, RngStreams, SimEvent, run
from src.execution import Calibration
from src.failures import FailureProfile, FailureRecord, LogCorpus, RuleSet, persistent_fault, user_modes
from src.handlers import HANDLERS
from src.scheduler import OutOfOrderStats, RunState, Scheduler, SchedulerConfig
from src.workload import Job, JobStatus

logger = logging.getLogger(__name__)


@dataclass
class EngineOptions:
    max_events: int = settings.MAX_EVENTS
    # run the full invariant check every N events; 0 turns it off
    audit_every: int = 0
    utilization_interval_min: float = 60.0
    utilization_samples_per_job: int = 120


@dataclass(frozen=True)
class PlacementRecord:
    job_id: str
    gpu_demand: int
    kind: str
    servers_used: int
    colocated: bool
    slowdown: float
    time: float
    # first placement of the job, as opposed to a restart after a failure or preemption
    first: bool


@dataclass(frozen=True)
class ClusterTick:
    time: float
    used_gpus: int
    empty_server_fraction: float
    empty_servers_per_rack: Dict[str, int]
    reserved_cores_fraction: float
    host_cores_fraction: float


@dataclass(frozen=True)
class Migration:
    job_id: str
    time: float
    servers_before: int
    servers_after: int


@dataclass(frozen=True)
class PreemptionRecord:
    job_id: str
    vc_id: str
    time: float
    for_job: str
    lost_gpu_minutes: float


@dataclass
class SimResult:
    topo: ClusterTopology
    runs: Dict[str, object]
    failures: List[FailureRecord]
    pool_failures: List[FailureRecord]
    placements: List[PlacementRecord]
    out_of_order: OutOfOrderStats
    ticks: List[ClusterTick]
    migrations: List[Migration]
    preemptions: List[PreemptionRecord]
    utilization: Dict[str, List[np.ndarray]]
    pool_minutes: float
    events_dispatched: int
    stale_events: int
    audits: int
    end_time: float
    calibration: Calibration


class World:
    """
    Owns one run. Event handlers (src.handlers) mutate it; the scheduler
    reaches back through the hook methods request_pass, timeout_at,
    backoff_until and start.
    """

    def __init__(self, topo: ClusterTopology, jobs: List[Job], quotas, scheduler_config: SchedulerConfig, seed,
                 calibration: Optional[Calibration] = None, profile: Optional[FailureProfile] = None,
                 rules: Optional[RuleSet] = None, corpus: Optional[LogCorpus] = None,
                 options: Optional[EngineOptions] = None):
        self.topo = topo
        self.config = scheduler_config
        self.options = options or EngineOptions()
        self.streams = RngStreams(seed)
        self.calibration = calibration or Calibration()
        self.profile = profile or FailureProfile(failure_probability=0.0)
        self.rules = rules
        self.corpus = corpus
        self.failures_enabled = self.profile.failure_probability > 0

        self.queue = EventQueue()
        self.state = AllocationState(topo)
        self.scheduler = Scheduler(topo, self.state, quotas, scheduler_config, hooks=self)
        self.handlers = dict(HANDLERS)

        self.failures: List[FailureRecord] = []
        self.pool_failures: List[FailureRecord] = []
        self.placements: List[PlacementRecord] = []
        self.ticks: List[ClusterTick] = []
        self.migrations: List[Migration] = []
        self.preemptions: List[PreemptionRecord] = []
        self.utilization: Dict[str, List[np.ndarray]] = {}
        self.pool = [0.0] * scheduler_config.pool_gpus if scheduler_config.prerun_pool else []
        self.pool_minutes = 0.0
        self.events_dispatched = 0
        self.stale_events = 0
        self.audits = 0
        self._pass_times = set()
        self._user_modes = {}

        for job in jobs:
            run_ = self.scheduler.register(job)
            if self.failures_enabled:
                run_.fault = persistent_fault(job, self.profile, self.streams.fresh('fault', job.job_id), self.modes_of(job))
        self.unfinished = len(jobs)

        unsuccessful = sum(1 for job in jobs if job.status_target is JobStatus.UNSUCCESSFUL)
        if not self.failures_enabled and unsuccessful:
            logger.info(f"Failures are disabled: {unsuccessful} unsuccessful-target jobs will run to completion")

        for job in jobs:
            self.queue.schedule(SimEvent(job.submit_time, kind=EventKind.JOB_ARRIVAL, job_id=job.job_id))
        if jobs:
            start = min(job.submit_time for job in jobs)
            self.schedule_periodic(EventKind.PREEMPT_CHECK, start, self.config.preempt_interval_min)
            self.schedule_periodic(EventKind.UTILIZATION_SAMPLE, start, self.options.utilization_interval_min)
            if self.config.migration:
                self.schedule_periodic(EventKind.MIGRATION_CHECK, start, self.config.migration_interval_min)

    def modes_of(self, job):
        user = job.user_id or f"{job.vc_id}-anonymous"
        if user not in self._user_modes:
            self._user_modes[user] = user_modes(self.profile, self.streams.fresh('user-modes', user))
        return self._user_modes[user]

    # -- scheduler hooks

    def request_pass(self, t):
        if t not in self._pass_times:
            self._pass_times.add(t)
            self.queue.schedule(SimEvent(t, kind=EventKind.SCHED_ATTEMPT))

    def timeout_at(self, run_, attempt):
        self.queue.schedule(SimEvent(attempt.deadline, kind=EventKind.ACQUISITION_TIMEOUT,
                                     job_id=run_.job_id, token=attempt.token))

    def backoff_until(self, run_, t):
        self.queue.schedule(SimEvent(t, kind=EventKind.BACKOFF_EXPIRED, job_id=run_.job_id, token=run_.token))

    def start(self, run_, placement, t):
        from src.handlers.execution import start_segment
        start_segment(self, run_, placement, t, first=run_.segments == 0)

    # -- bookkeeping used by handlers

    def pass_done(self, t):
        self._pass_times.discard(t)

    def schedule_periodic(self, kind, t, interval):
        self.queue.schedule(SimEvent(t, kind=kind, payload=interval))

    def reschedule(self, ev):
        if self.unfinished > 0:
            self.schedule_periodic(ev.kind, ev.time + ev.payload, ev.payload)

    def job_done(self, run_, status, t):
        run_.status = status
        run_.end_time = t
        run_.state = RunState.DONE
        run_.token += 1
        self.unfinished -= 1

    def dispatch(self, ev: SimEvent):
        handler = self.handlers.get(ev.kind)
        if handler is None:
            logger.warning(f"No handler for {ev.kind}")
            return
        handler(self, ev)
        self.events_dispatched += 1
        if self.options.audit_every and self.events_dispatched % self.options.audit_every == 0:
            self.scheduler.check_invariants(ev.time)
            self.audits += 1

    def report(self) -> SimResult:
        end = max([r.end_time for r in self.scheduler.runs.values() if r.end_time is not None], default=self.queue.now())
        return SimResult(topo=self.topo, runs=self.scheduler.runs, failures=self.failures,
                         pool_failures=self.pool_failures, placements=self.placements,
                         out_of_order=self.scheduler.ooo, ticks=self.ticks, migrations=self.migrations,
                         preemptions=self.preemptions, utilization=self.utilization,
                         pool_minutes=self.pool_minutes, events_dispatched=self.events_dispatched,
                         stale_events=self.stale_events, audits=self.audits, end_time=end,
                         calibration=self.calibration)


def simulate(topo, jobs, quotas, scheduler_config=None, seed=0, stop=None, **kwargs) -> SimResult:
    """Build a world for `jobs` and run it to completion (or until `stop(world)` holds)."""
    world = World(topo, jobs, quotas, scheduler_config or SchedulerConfig(), seed, **kwargs)
    result = run(world, world.options.max_events, stop=stop)
    logger.debug(f"{world.events_dispatched} events dispatched, {world.stale_events} stale")
    return result

