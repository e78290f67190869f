"""
Fair-share VC queues and locality-aware gang acquisition.

A job is placed only when it holds all of its GPUs. The head of each VC queue
may hold a partial set while it waits (for at most the acquisition timeout);
every other ready job is placed out of order only if it fits completely right
now. Timeouts release held GPUs, back off, and after enough retries relax the
locality constraint. Only timeouts where the cluster had enough free GPUs count
towards relaxation, and a relaxed job takes the least-relaxed placement that
fits when its next attempt opens.
"""
import itertools
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

from src import settings
from src.cluster import AllocationState, ClusterTopology, Placement, rank_candidates
from src.lib.errors import ConfigError, SimError, UnknownVC
from src.workload import Job

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalityConstraint:
    max_servers: int
    require_single_rdma_domain: bool = True
    # number of relaxations applied so far
    stage: int = 0

    @property
    def rdma(self):
        return self.require_single_rdma_domain


def initial_constraint(gpu_demand, topo: ClusterTopology) -> LocalityConstraint:
    return LocalityConstraint(max_servers=max(1, math.ceil(gpu_demand / topo.max_gpus_per_server)))


def relax(constraint: LocalityConstraint, retry_count, relax_after=settings.RELAX_AFTER, server_count=None) -> LocalityConstraint:
    """
    Weaken `constraint` to the stage reached after `retry_count` retries: each
    stage doubles max_servers (capped at the server count); the second stage
    also drops the single-RDMA-domain requirement. Never strengthens.
    """
    target = retry_count // relax_after if relax_after > 0 else 0
    while constraint.stage < target:
        cap = server_count if server_count is not None else constraint.max_servers * 2
        max_servers = min(constraint.max_servers * 2, cap)
        stage = constraint.stage + 1
        rdma = constraint.require_single_rdma_domain and stage < 2
        constraint = LocalityConstraint(max(max_servers, constraint.max_servers), rdma, stage)
    return constraint


class DelayCause(Enum):
    FAIR_SHARE = 'FairShare'
    FRAGMENTATION = 'Fragmentation'

    def __str__(self):
        return self.value


class DelayLedger:
    """Cause-labeled intervals tiling [submission, first start]."""

    def __init__(self):
        self.intervals: List[Tuple[float, float, DelayCause]] = []
        self._open_start = None
        self._open_cause = None
        self.closed = False

    def mark(self, t, cause):
        if self.closed or cause is self._open_cause:
            return
        if self._open_cause is not None and t > self._open_start:
            self.intervals.append((self._open_start, t, self._open_cause))
            self._open_start = t
        elif self._open_cause is None:
            self._open_start = t
        self._open_cause = cause

    def close(self, t):
        if self.closed:
            return
        if self._open_cause is not None and t > self._open_start:
            self.intervals.append((self._open_start, t, self._open_cause))
        self._open_cause = None
        self.closed = True

    def total(self):
        return sum(end - start for start, end, _ in self.intervals)

    def by_cause(self):
        totals = {cause: 0.0 for cause in DelayCause}
        for start, end, cause in self.intervals:
            totals[cause] += end - start
        return totals


class RunState(Enum):
    PENDING = 'pending'
    PRERUN = 'prerun'
    QUEUED = 'queued'
    ACQUIRING = 'acquiring'
    BACKOFF = 'backoff'
    RUNNING = 'running'
    DONE = 'done'

    def __str__(self):
        return self.value


WAITING = (RunState.QUEUED, RunState.ACQUIRING, RunState.BACKOFF)


@dataclass
class AcquisitionAttempt:
    job_id: str
    started_at: float
    deadline: float
    retry_count: int
    constraint: LocalityConstraint
    token: int
    order: int
    held_slots: List[Tuple[str, int]] = field(default_factory=list)


@dataclass
class JobRun:
    """Runtime record of one job across all its attempts."""
    job: Job
    order: int
    constraint: LocalityConstraint
    state: RunState = RunState.PENDING
    retry_count: int = 0
    # timeouts with enough free GPUs in the cluster; these drive relaxation
    locality_retries: int = 0
    attempt_index: int = 0
    token: int = 0
    entered_at: Optional[float] = None
    first_start: Optional[float] = None
    ledger: DelayLedger = field(default_factory=DelayLedger)
    placement: Optional[Placement] = None
    placement_class: object = None
    slowdown: float = 1.0
    # ideal minutes of training done, and where the current segment began
    progress: float = 0.0
    segment_start: Optional[float] = None
    segment_progress: float = 0.0
    segments: int = 0
    held_since: Optional[float] = None
    # execution minutes over the whole job, and within the current attempt
    elapsed_run: float = 0.0
    attempt_run: float = 0.0
    # (reason, attempt minutes) this attempt is going to fail at
    failure: Optional[tuple] = None
    failure_drawn: bool = False
    gpu_minutes: float = 0.0
    stage_at_start: Optional[int] = None
    servers_at_start: Optional[int] = None
    reserved_cores: float = 0.0
    reserved_mem_gb: float = 0.0
    host_cores: Dict[str, float] = field(default_factory=dict)
    fault: object = None
    status: object = None
    end_time: Optional[float] = None
    utilization_drawn: int = 0

    @property
    def job_id(self):
        return self.job.job_id

    @property
    def queueing_delay(self):
        if self.first_start is None or self.entered_at is None:
            return None
        return self.first_start - self.entered_at


@dataclass
class VirtualCluster:
    vc_id: str
    quota: int
    queue: Deque[str] = field(default_factory=deque)


@dataclass
class SchedulerConfig:
    acquisition_timeout_min: float = settings.ACQUISITION_TIMEOUT_MIN
    backoff_min: float = settings.BACKOFF_MIN
    relax_after: int = settings.RELAX_AFTER
    preempt_threshold: float = settings.PREEMPT_THRESHOLD
    checkpoint_interval_min: float = settings.CHECKPOINT_INTERVAL_MIN
    max_retries: int = settings.MAX_RETRIES
    pack_small_jobs: bool = True
    preempt_interval_min: float = 10.0
    migration_interval_min: float = 30.0
    migration_pause_min: float = 5.0
    # scenario flags
    wait_for_locality: bool = False
    extra_wait_min: float = 30.0
    migration: bool = False
    dedicated_servers: bool = False
    prerun_pool: bool = False
    pool_gpus: int = 8
    prerun_window_min: float = 15.0
    prerun_catches: Tuple[str, ...] = ('Syntax error', 'Semantic error', 'Import error')
    adaptive_retries: bool = False

    SCHEDULER_KEYS = ('acquisition_timeout_min', 'backoff_min', 'relax_after', 'preempt_threshold',
                      'checkpoint_interval_min', 'max_retries', 'pack_small_jobs', 'preempt_interval_min',
                      'migration_interval_min', 'migration_pause_min')
    SCENARIO_KEYS = ('wait_for_locality', 'extra_wait_min', 'migration', 'dedicated_servers', 'prerun_pool',
                     'pool_gpus', 'prerun_window_min', 'prerun_catches', 'adaptive_retries')

    @classmethod
    def from_dicts(cls, scheduler=None, scenarios=None):
        config = cls()
        for section, keys, values in (('scheduler', cls.SCHEDULER_KEYS, scheduler or {}),
                                      ('scenarios', cls.SCENARIO_KEYS, scenarios or {})):
            for key, value in values.items():
                if key not in keys:
                    raise ConfigError(f"{section}.{key}")
                if key == 'prerun_catches':
                    value = tuple(value)
                setattr(config, key, value)
        config.validate()
        return config

    def validate(self):
        positive = ('acquisition_timeout_min', 'backoff_min', 'checkpoint_interval_min',
                    'preempt_interval_min', 'migration_interval_min')
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"scheduler.{key}", "must be > 0")
        if self.relax_after < 1 or self.max_retries < 0:
            raise ConfigError("scheduler.relax_after", "relax_after must be >= 1 and max_retries >= 0")
        if self.preempt_threshold <= 0:
            raise ConfigError("scheduler.preempt_threshold", "must be > 0")
        if self.migration_pause_min < 0 or self.extra_wait_min < 0 or self.prerun_window_min < 0:
            raise ConfigError("scenarios.extra_wait_min", "durations must be >= 0")
        if self.prerun_pool and self.pool_gpus < 1:
            raise ConfigError("scenarios.pool_gpus", "the pre-run pool needs at least one GPU")

    @property
    def effective_relax_after(self):
        """Retries before each relaxation; waiting longer for locality adds retries."""
        if not self.wait_for_locality:
            return self.relax_after
        cycle = self.acquisition_timeout_min + self.backoff_min
        return self.relax_after + math.ceil(self.extra_wait_min / cycle)


@dataclass(frozen=True)
class Complete:
    slots: Tuple[Tuple[str, int], ...]


@dataclass(frozen=True)
class Partial:
    held: Tuple[Tuple[str, int], ...]
    gained: int


class _NoProgress:
    def __repr__(self):
        return 'NoProgress'


NoProgress = _NoProgress()


@dataclass(frozen=True)
class OutOfOrderDecision:
    time: float
    job_id: str
    gpu_demand: int
    # earlier-arrived jobs with more than 4 GPUs still waiting at the decision
    waiting_large: Tuple[str, ...]


class OutOfOrderStats:
    def __init__(self):
        self.decisions = 0
        self.out_of_order = 0
        self.records: List[OutOfOrderDecision] = []

    def record_out_of_order(self, decision: Optional[OutOfOrderDecision]):
        """Count one placement decision; `decision` is None for an in-order placement."""
        self.decisions += 1
        if decision is not None:
            self.out_of_order += 1
            self.records.append(decision)

    @property
    def fraction(self):
        return self.out_of_order / self.decisions if self.decisions else 0.0


@dataclass(frozen=True)
class Preemption:
    job_id: str
    vc_id: str
    gpus: int
    for_job: str


class Scheduler:
    """
    :param hooks: receives the scheduler's side effects; needs
        request_pass(t), timeout_at(run, attempt), backoff_until(run, t) and
        start(run, placement, t)
    """

    def __init__(self, topo: ClusterTopology, state: AllocationState, quotas, config: SchedulerConfig, hooks):
        if sum(quotas.values()) > topo.total_gpus:
            raise ConfigError("vcs", f"quotas sum to {sum(quotas.values())}, more than the {topo.total_gpus} GPUs")
        if any(q < 0 for q in quotas.values()):
            raise ConfigError("vcs", "quotas must be >= 0")
        self.topo = topo
        self.state = state
        self.config = config
        self.hooks = hooks
        self.vcs: Dict[str, VirtualCluster] = {vc_id: VirtualCluster(vc_id, int(q)) for vc_id, q in sorted(quotas.items())}
        self.runs: Dict[str, JobRun] = {}
        self.pending: Dict[str, AcquisitionAttempt] = {}
        self.ooo = OutOfOrderStats()
        # servers reserved for one distributed job in the dedicated-servers scenario
        self.exclusive: Dict[str, str] = {}
        self._orders = itertools.count()
        self._attempt_orders = itertools.count()
        self._marked_usage: Dict[str, int] = {}
        self._dirty = set()
        self.relax_after = config.effective_relax_after

    # -- queues

    def register(self, job: Job) -> JobRun:
        if job.vc_id not in self.vcs:
            raise UnknownVC(f"job {job.job_id} names undeclared VC '{job.vc_id}'")
        run = JobRun(job=job, order=next(self._orders), constraint=initial_constraint(job.gpu_demand, self.topo))
        self.runs[job.job_id] = run
        return run

    def submit(self, job: Job, t, front=False) -> JobRun:
        """Enqueue `job` in its VC; reserves host resources proportionally on first submission."""
        run = self.runs.get(job.job_id) or self.register(job)
        vc = self.vcs[job.vc_id]
        if run.entered_at is None:
            run.entered_at = t
            reference = self.topo.reference_server()
            share = job.gpu_demand / reference.gpu_count
            run.reserved_cores = share * reference.cpu_cores
            run.reserved_mem_gb = share * reference.mem_gb
        if front:
            vc.queue.appendleft(job.job_id)
        else:
            vc.queue.append(job.job_id)
        run.state = RunState.QUEUED
        run.constraint = initial_constraint(job.gpu_demand, self.topo)
        run.retry_count = 0
        run.locality_retries = 0
        self._dirty.add(vc.vc_id)
        self.attribute_delay(run, t)
        self.hooks.request_pass(t)
        return run

    def requeue(self, run: JobRun, t, backoff=0.0):
        """Put a retried or preempted job back at the head of its VC queue."""
        self.submit(run.job, t, front=True)
        if backoff > 0:
            run.state = RunState.BACKOFF
            self.hooks.backoff_until(run, t + backoff)

    def waiting_runs(self):
        for vc in self.vcs.values():
            for job_id in vc.queue:
                yield self.runs[job_id]

    def fair_share_order(self):
        def share(vc):
            usage = self.state.usage_of(vc.vc_id)
            ratio = usage / vc.quota if vc.quota > 0 else (math.inf if usage else 0.0)
            return ratio, vc.vc_id
        return sorted(self.vcs.values(), key=share)

    # -- fairness

    def _own_held(self, run):
        attempt = self.pending.get(run.job_id)
        return len(attempt.held_slots) if attempt else 0

    def within_quota(self, run):
        vc = self.vcs[run.job.vc_id]
        usage = self.state.usage_of(vc.vc_id) - self._own_held(run)
        return usage + run.job.gpu_demand <= vc.quota

    def _needy_vcs(self):
        needy = set()
        for vc in self.vcs.values():
            for job_id in vc.queue:
                run = self.runs[job_id]
                if run.state in WAITING and self.within_quota(run):
                    needy.add(vc.vc_id)
                    break
        return needy

    def eligible(self, run, needy):
        """Within quota, or borrowing share no other VC is waiting for."""
        if self.within_quota(run):
            return True
        return not (needy() - {run.job.vc_id})

    def attribute_delay(self, run, t):
        if run.first_start is not None:
            return
        cause = DelayCause.FRAGMENTATION if self.within_quota(run) else DelayCause.FAIR_SHARE
        run.ledger.mark(t, cause)

    def _mark_ledgers(self, t):
        for vc in self.vcs.values():
            usage = self.state.usage_of(vc.vc_id)
            if vc.vc_id not in self._dirty and self._marked_usage.get(vc.vc_id) == usage:
                continue
            for job_id in vc.queue:
                self.attribute_delay(self.runs[job_id], t)
            self._marked_usage[vc.vc_id] = usage
        self._dirty.clear()

    # -- acquisition

    def _server_ok(self, server_id, job_id, strict):
        owner = self.exclusive.get(server_id)
        if owner is not None and owner != job_id:
            return False
        if strict:
            return self.state.holders_on(server_id) <= {job_id}
        return True

    def _allocate(self, run, slots, strict):
        self.state.allocate(run.job_id, run.job.vc_id, slots)
        if strict:
            for server_id, _ in slots:
                self.exclusive[server_id] = run.job_id

    def release(self, job_id):
        self.state.release(job_id)
        for server_id in [s for s, owner in self.exclusive.items() if owner == job_id]:
            del self.exclusive[server_id]

    def _plan(self, servers, held_servers, need, constraint, job_id, strict):
        """Greedy take over `servers` (ordered (server_id, free)) after the held servers."""
        picks = []
        total = 0
        used = list(held_servers)
        for server_id in held_servers:
            if total >= need:
                break
            free = self.state.free_in_server(server_id) if self._server_ok(server_id, job_id, strict) else 0
            take = min(free, need - total)
            if take:
                picks.append((server_id, take))
                total += take
        held = set(held_servers)
        for server_id, free in servers:
            if total >= need or len(used) >= constraint.max_servers:
                break
            if server_id in held or free == 0 or not self._server_ok(server_id, job_id, strict):
                continue
            take = min(free, need - total)
            picks.append((server_id, take))
            used.append(server_id)
            total += take
        return picks, total

    def try_acquire(self, run: JobRun, constraint: LocalityConstraint, hold=True):
        """
        Walk the candidate ranking under `constraint`.

        With hold=True the job keeps whatever it gets (the VC head acquiring
        its gang); with hold=False only a complete placement is taken.
        Returns Complete(slots), Partial(held, gained) or NoProgress.
        """
        job = run.job
        attempt = self.pending.get(job.job_id) if hold else None
        held = list(attempt.held_slots) if attempt else []
        need = job.gpu_demand - len(held)
        if need <= 0:
            return Complete(tuple(held))
        free_total = self.state.free_gpus
        if free_total == 0 or (not hold and free_total < need):
            return NoProgress
        strict = self.config.dedicated_servers and constraint.max_servers > 1
        ranking = rank_candidates(self.state, self.topo)

        if not held and self.config.pack_small_jobs and job.gpu_demand <= self.topo.max_gpus_per_server:
            best = None
            for rack in ranking:
                for server_id, free in rack.servers:
                    if free >= job.gpu_demand and (best is None or free < best[1]) and self._server_ok(server_id, job.job_id, strict):
                        best = (server_id, free)
            if best is not None:
                slots = [(best[0], index) for index in self.state.free_slots(best[0])[:job.gpu_demand]]
                self._allocate(run, slots, strict)
                return Complete(tuple(slots))

        held_servers = list(dict.fromkeys(server_id for server_id, _ in held))
        if constraint.require_single_rdma_domain:
            if held_servers:
                rack_id = self.topo.rack_of(held_servers[0])
                options = [next(r for r in ranking if r.rack_id == rack_id)]
            else:
                options = ranking
            best_plan = None
            for rack in options:
                picks, total = self._plan(rack.servers, held_servers, need, constraint, job.job_id, strict)
                if total == need:
                    best_plan = (picks, total)
                    break
                if best_plan is None or total > best_plan[1]:
                    best_plan = (picks, total)
            picks, total = best_plan if best_plan else ([], 0)
        else:
            rank_index = {rack.rack_id: i for i, rack in enumerate(ranking)}
            servers = [(server_id, free, rank_index[rack.rack_id]) for rack in ranking for server_id, free in rack.servers]
            servers.sort(key=lambda item: (-item[1], item[2], item[0]))
            picks, total = self._plan([(s, f) for s, f, _ in servers], held_servers, need, constraint, job.job_id, strict)

        if total < need and not hold:
            return NoProgress
        if total == 0:
            return NoProgress
        slots = []
        for server_id, take in picks:
            slots.extend((server_id, index) for index in self.state.free_slots(server_id)[:take])
        self._allocate(run, slots, strict)
        if total == need:
            return Complete(tuple(held + slots))
        attempt.held_slots.extend(slots)
        return Partial(tuple(attempt.held_slots), len(slots))

    def _open_attempt(self, run, now):
        run.token += 1
        attempt = AcquisitionAttempt(job_id=run.job_id, started_at=now,
                                     deadline=now + self.config.acquisition_timeout_min,
                                     retry_count=run.retry_count, constraint=run.constraint,
                                     token=run.token, order=next(self._attempt_orders))
        self.pending[run.job_id] = attempt
        run.state = RunState.ACQUIRING
        return attempt

    def fully_relaxed(self, constraint):
        return not constraint.rdma and constraint.max_servers >= len(self.topo.servers)

    def _escalate(self, run, attempt):
        """
        Look for a complete placement from the current stage upwards and adopt
        the first stage that fits. The attempt's constraint is left alone when
        nothing fits.
        """
        constraint = run.constraint
        while True:
            outcome = self.try_acquire(run, constraint, hold=False)
            if isinstance(outcome, Complete):
                if constraint != run.constraint:
                    logger.debug(f"{run.job_id} placed at relaxation stage {constraint.stage}")
                run.constraint = attempt.constraint = constraint
                return outcome
            if outcome is NoProgress and self.state.free_gpus < run.job.gpu_demand:
                return NoProgress
            if self.fully_relaxed(constraint):
                return NoProgress
            constraint = relax(constraint, (constraint.stage + 1) * self.relax_after, self.relax_after,
                               len(self.topo.servers))

    def on_timeout(self, job_id, now):
        """
        Relinquish everything the attempt holds and back off.

        :return: number of GPUs released
        """
        attempt = self.pending.pop(job_id, None)
        run = self.runs[job_id]
        if attempt is None:
            return 0
        released = len(attempt.held_slots)
        self.release(job_id)
        run.token += 1
        run.retry_count += 1
        if self.state.free_gpus >= run.job.gpu_demand:
            run.locality_retries += 1
        run.constraint = relax(run.constraint, run.locality_retries, self.relax_after, len(self.topo.servers))
        run.state = RunState.BACKOFF
        self._dirty.add(run.job.vc_id)
        self.hooks.backoff_until(run, now + self.config.backoff_min)
        logger.debug(f"{job_id} timed out at {now:.3f} holding {released} GPUs "
                     f"(retry {run.retry_count}, max_servers {run.constraint.max_servers})")
        return released

    def on_backoff_expired(self, job_id, now):
        run = self.runs[job_id]
        if run.state is RunState.BACKOFF:
            run.state = RunState.QUEUED
            self.hooks.request_pass(now)

    # -- the pass

    def _out_of_order_decision(self, run, now):
        earlier = [other for other in self.waiting_runs() if other.order < run.order and other.job_id != run.job_id]
        if not earlier:
            return None
        large = tuple(other.job_id for other in earlier if other.job.gpu_demand > 4)
        return OutOfOrderDecision(now, run.job_id, run.job.gpu_demand, large)

    def _start(self, run, slots, now):
        self.ooo.record_out_of_order(self._out_of_order_decision(run, now))
        self.pending.pop(run.job_id, None)
        self.vcs[run.job.vc_id].queue.remove(run.job_id)
        self._dirty.add(run.job.vc_id)
        run.token += 1
        run.state = RunState.RUNNING
        if run.first_start is None:
            run.first_start = now
            run.ledger.close(now)
            run.stage_at_start = run.constraint.stage
        placement = Placement(run.job_id, tuple(slots))
        if run.servers_at_start is None:
            run.servers_at_start = placement.servers_used
        self.hooks.start(run, placement, now)
        return placement

    def _pass_once(self, now):
        progress = False
        for attempt in sorted(self.pending.values(), key=lambda a: (a.started_at, a.order)):
            run = self.runs[attempt.job_id]
            outcome = self.try_acquire(run, attempt.constraint, hold=True)
            if isinstance(outcome, Complete):
                self._start(run, outcome.slots, now)
                progress = True
            elif isinstance(outcome, Partial):
                progress = True

        cache = {}

        def needy():
            if 'needy' not in cache:
                cache['needy'] = self._needy_vcs()
            return cache['needy']

        for vc in self.fair_share_order():
            if not vc.queue:
                continue
            head = self.runs[vc.queue[0]]
            if head.state is RunState.QUEUED and self.eligible(head, needy):
                attempt = self._open_attempt(head, now)
                outcome = self._escalate(head, attempt) if head.constraint.stage > 0 else NoProgress
                if not isinstance(outcome, Complete):
                    outcome = self.try_acquire(head, attempt.constraint, hold=True)
                if isinstance(outcome, Complete):
                    self._start(head, outcome.slots, now)
                    progress = True
                    cache.clear()
                else:
                    self.hooks.timeout_at(head, attempt)
                    if isinstance(outcome, Partial):
                        progress = True
                        cache.clear()
            for job_id in list(vc.queue)[1:]:
                free = self.state.free_gpus
                if free == 0:
                    break
                run = self.runs[job_id]
                if run.state is not RunState.QUEUED or run.job.gpu_demand > free:
                    continue
                if not self.eligible(run, needy):
                    continue
                outcome = self.try_acquire(run, run.constraint, hold=False)
                if isinstance(outcome, Complete):
                    self._start(run, outcome.slots, now)
                    progress = True
                    cache.clear()
        return progress

    def schedule_pass(self, now):
        """Repeat until nothing more can be placed at this instant."""
        while self._pass_once(now):
            pass
        self._mark_ledgers(now)

    # -- preemption and migration

    def maybe_preempt(self, now) -> List[Preemption]:
        total = self.topo.total_gpus
        if self.state.used_gpus < self.config.preempt_threshold * total:
            return []
        over = [(self.state.usage_of(vc.vc_id) - vc.quota, vc.vc_id) for vc in self.vcs.values()
                if self.state.usage_of(vc.vc_id) > vc.quota]
        if not over:
            return []
        needy_run = None
        for vc in self.fair_share_order():
            for job_id in vc.queue:
                run = self.runs[job_id]
                if run.state in WAITING and self.within_quota(run):
                    needy_run = run
                    break
            if needy_run is not None:
                break
        if needy_run is None:
            return []

        over.sort(key=lambda item: (-item[0], item[1]))
        excess, victim_vc = over[0]
        running = [run for run in self.runs.values() if run.state is RunState.RUNNING and run.job.vc_id == victim_vc]
        running.sort(key=lambda r: (-r.segment_start, r.job_id))
        actions = []
        freed = 0
        for run in running:
            if freed >= needy_run.job.gpu_demand or excess - freed <= 0:
                break
            actions.append(Preemption(run.job_id, victim_vc, run.job.gpu_demand, needy_run.job_id))
            freed += run.job.gpu_demand
        if actions:
            logger.debug(f"Preempting {[a.job_id for a in actions]} from {victim_vc} for {needy_run.job_id} at {now:.2f}")
        return actions

    def migration_check(self, now):
        """
        Re-pack running distributed jobs onto fewer servers when the free slots allow.

        :return: list of (run, old_placement, new_placement); the allocation is already moved
        """
        if not self.config.migration:
            return []
        moves = []
        candidates = [run for run in self.runs.values()
                      if run.state is RunState.RUNNING and run.placement is not None and run.placement.servers_used > 1]
        for run in sorted(candidates, key=lambda r: r.job_id):
            old = run.placement
            single_rack = len(old.racks(self.topo)) == 1
            target = LocalityConstraint(max_servers=old.servers_used - 1,
                                        require_single_rdma_domain=single_rack, stage=run.constraint.stage)
            minimum = math.ceil(run.job.gpu_demand / self.topo.max_gpus_per_server)
            if target.max_servers < minimum:
                continue
            strict_before = bool(self.exclusive) and any(owner == run.job_id for owner in self.exclusive.values())
            self.release(run.job_id)
            outcome = self.try_acquire(run, target, hold=False)
            if isinstance(outcome, Complete) and len({s for s, _ in outcome.slots}) < old.servers_used:
                new = Placement(run.job_id, outcome.slots)
                run.placement = new
                moves.append((run, old, new))
            else:
                if isinstance(outcome, Complete):
                    self.release(run.job_id)
                self._allocate(run, list(old.slots), strict_before)
        return moves

    # -- bookkeeping

    def check_invariants(self, now):
        """Full recount plus gang and timeout checks; raises SimError on a violation."""
        self.state.reconcile()
        for run in self.runs.values():
            held = len(self.state.slots_of(run.job_id))
            if run.state is RunState.RUNNING and held != run.job.gpu_demand:
                raise SimError(f"{run.job_id} is running on {held} of {run.job.gpu_demand} GPUs")
            if run.state not in (RunState.RUNNING, RunState.ACQUIRING) and held:
                raise SimError(f"{run.job_id} holds {held} GPUs while {run.state}")
        for attempt in self.pending.values():
            if attempt.held_slots and now - attempt.started_at > self.config.acquisition_timeout_min + 1e-9:
                raise SimError(f"{attempt.job_id} held a partial gang past its timeout")
        return True

    def usage_counter(self):
        return Counter({vc_id: self.state.usage_of(vc_id) for vc_id in self.vcs})
