"""
Running jobs: segments, completion, kills, failures, preemption and migration.

A segment is one uninterrupted stretch on one placement. Its length is the
remaining ideal work times the placement's slowdown; it ends at the earliest
of completion, the kill point and the attempt's failure point.
"""
import logging
import math

from src.engine import EventKind, SimEvent
from src.execution import placement_class, sample_utilization, slowdown_factor, utilization_mean
from src.failures import (CATEGORIES, FailureReason, FailureRecord, RetryAction, RetryPolicy, apply_retry_policy,
                          classify_log, sample_failure)
from src.lib.decorators import need_job
from src.scheduler import RunState
from src.workload import JobStatus

logger = logging.getLogger(__name__)


def _max_retries(world, job):
    return job.max_retries if job.max_retries is not None else world.config.max_retries


def start_segment(world, run, placement, t, first=False, pause=0.0, record=True):
    job = run.job
    run.placement = placement
    run.placement_class = cls = placement_class(placement, world.state)
    run.slowdown = slowdown_factor(cls, world.calibration)
    run.state = RunState.RUNNING
    run.token += 1
    run.segments += 1
    if run.held_since is None:
        run.held_since = t
    run.segment_start = t + pause
    run.segment_progress = run.progress
    run.host_cores = {}
    for server_id in placement.servers:
        server = world.topo.server(server_id)
        on_server = sum(1 for s, _ in placement.slots if s == server_id)
        run.host_cores[server_id] = on_server / server.gpu_count * server.cpu_cores
    if record:
        world.placements.append(_placement_record(run, t, first))

    remaining = max(job.ideal_duration - run.progress, 0.0) * run.slowdown
    if world.failures_enabled and not run.failure_drawn:
        rng = world.streams.fresh('failure', job.job_id, run.attempt_index)
        drawn = sample_failure(job, world.profile, rng, attempt_index=run.attempt_index,
                               max_retries=_max_retries(world, job), fault=run.fault,
                               modes=world.modes_of(job), max_rtf=remaining)
        run.failure = (drawn[0], drawn[1] + run.attempt_run) if drawn else None
        run.failure_drawn = True

    outcomes = [(remaining, 2, JobStatus.PASSED)]
    if job.status_target is JobStatus.KILLED and job.kill_time is not None:
        outcomes.append((max(job.kill_time - run.elapsed_run, 0.0), 1, JobStatus.KILLED))
    if run.failure is not None:
        outcomes.append((max(run.failure[1] - run.attempt_run, 0.0), 0, None))
    delta, _, status = min(outcomes, key=lambda item: (item[0], item[1]))
    kind = EventKind.FAILURE_FIRED if status is None else EventKind.JOB_FINISH
    world.queue.schedule(SimEvent(run.segment_start + delta, kind=kind, job_id=job.job_id,
                                  payload=status, token=run.token))


def _placement_record(run, t, first):
    from src.simulation import PlacementRecord
    cls = run.placement_class
    return PlacementRecord(job_id=run.job_id, gpu_demand=run.job.gpu_demand, kind=str(cls.kind),
                           servers_used=cls.servers_used, colocated=cls.colocated,
                           slowdown=run.slowdown, time=t, first=first)


def close_segment(world, run, t):
    """Account the executed part of the current segment; GPUs stay allocated."""
    executed = max(t - run.segment_start, 0.0)
    run.progress = min(run.segment_progress + executed / run.slowdown, run.job.ideal_duration)
    run.elapsed_run += executed
    run.attempt_run += executed
    _draw_utilization(world, run, executed)
    run.segment_start = t
    run.segment_progress = run.progress


def _release(world, run, t):
    run.gpu_minutes += (t - run.held_since) * run.job.gpu_demand
    run.held_since = None
    run.host_cores = {}
    world.scheduler.release(run.job_id)


def _draw_utilization(world, run, minutes):
    cap = world.options.utilization_samples_per_job - run.utilization_drawn
    size = min(int(math.ceil(minutes)), cap)
    if size <= 0:
        return
    mean = utilization_mean(run.job.gpu_demand, run.placement.servers_used, world.calibration, run.job.status_target)
    rng = world.streams.fresh('utilization', run.job_id, run.segments)
    world.utilization.setdefault(run.job_id, []).append(
        sample_utilization(mean, world.calibration.utilization_sigma, size, rng))
    run.utilization_drawn += size


@need_job
def job_finish(world, ev, run):
    close_segment(world, run, ev.time)
    _release(world, run, ev.time)
    world.job_done(run, ev.payload, ev.time)
    world.request_pass(ev.time)


@need_job
def failure_fired(world, ev, run):
    job = run.job
    close_segment(world, run, ev.time)
    _release(world, run, ev.time)
    injected, _ = run.failure
    rtf = run.attempt_run

    reason, rule_id = injected, None
    if world.corpus is not None and world.rules is not None:
        text = world.corpus.render(injected, world.streams.fresh('failure-log', job.job_id, run.attempt_index),
                                   job_id=job.job_id, user=job.user_id or '')
        classification = classify_log(text.splitlines(), world.rules)
        reason, rule_id = classification.reason, classification.rule_id
    record = FailureRecord(job_id=job.job_id, attempt_index=run.attempt_index, reason=reason,
                           categories=CATEGORIES[reason], rtf_minutes=rtf, gpu_demand=job.gpu_demand,
                           time=ev.time, user_id=job.user_id,
                           injected_reason=injected if injected is not reason else None, rule_id=rule_id)
    world.failures.append(record)

    policy = RetryPolicy.ADAPTIVE if world.config.adaptive_retries else RetryPolicy.STATIC
    decision = apply_retry_policy(job, record, policy, _max_retries(world, job), backoff=world.config.backoff_min)
    if decision.action is RetryAction.RETRY:
        run.attempt_index += 1
        run.progress = 0.0
        run.attempt_run = 0.0
        run.failure = None
        run.failure_drawn = False
        world.scheduler.requeue(run, ev.time, decision.backoff)
    else:
        world.job_done(run, JobStatus.UNSUCCESSFUL, ev.time)
    world.request_pass(ev.time)


def preempt(world, run, t, for_job):
    """Stop a running job; work since its last checkpoint is lost and it queues again at the head."""
    close_segment(world, run, t)
    interval = world.config.checkpoint_interval_min
    kept = math.floor(run.progress / interval) * interval
    lost = (run.progress - kept) * run.slowdown * run.job.gpu_demand
    run.progress = kept
    segment_minutes = max(t - (run.held_since or t), 0.0)
    _release(world, run, t)
    run.token += 1
    reason = FailureReason.JOB_PREEMPTED
    world.failures.append(FailureRecord(job_id=run.job_id, attempt_index=run.attempt_index, reason=reason,
                                        categories=CATEGORIES[reason], rtf_minutes=segment_minutes,
                                        gpu_demand=run.job.gpu_demand, time=t, user_id=run.job.user_id))
    from src.simulation import PreemptionRecord
    world.preemptions.append(PreemptionRecord(run.job_id, run.job.vc_id, t, for_job, lost))
    world.scheduler.requeue(run, t)


def migrate(world, run, old, new, t):
    """The scheduler already moved the allocation; pay the pause and continue on `new`."""
    from src.simulation import Migration
    close_segment(world, run, t)
    world.migrations.append(Migration(run.job_id, t, old.servers_used, new.servers_used))
    start_segment(world, run, new, t, pause=world.config.migration_pause_min, record=False)
