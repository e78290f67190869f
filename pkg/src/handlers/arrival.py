"""
Job arrival, with the optional pre-run pool in front of the cluster.

The pool is a few single-GPU workers that run each new job for a short
window. A job whose persistent fault is one the pool is set to catch fails
there and never reaches the cluster; everyone else loses the window and is
submitted when screening ends.
"""
import heapq
import logging

from src.engine import EventKind, SimEvent
from src.failures import CATEGORIES, FailureRecord, sample_rtf
from src.lib.decorators import need_job
from src.scheduler import RunState
from src.workload import JobStatus

logger = logging.getLogger(__name__)

SCREENED = 'screened'


@need_job
def job_arrival(world, ev, run):
    job = run.job
    if job.gpu_demand > world.topo.total_gpus:
        logger.warning(f"{job.job_id} asks for {job.gpu_demand} GPUs but the cluster has {world.topo.total_gpus}; "
                       f"marking it unsuccessful")
        world.job_done(run, JobStatus.UNSUCCESSFUL, ev.time)
        return
    if world.config.prerun_pool and ev.payload != SCREENED:
        screen(world, run, ev.time)
        return
    world.scheduler.submit(job, ev.time)


def screen(world, run, t):
    job = run.job
    config = world.config
    start = max(t, heapq.heappop(world.pool))
    fault = run.fault
    if fault is not None and str(fault) in config.prerun_catches:
        rng = world.streams.fresh('prerun', job.job_id)
        rtf = sample_rtf(world.profile, fault, rng)
        minutes = min(rtf, config.prerun_window_min)
        end = start + minutes
        world.pool_failures.append(FailureRecord(job_id=job.job_id, attempt_index=0, reason=fault,
                                                 categories=CATEGORIES[fault], rtf_minutes=minutes,
                                                 gpu_demand=1, time=end, user_id=job.user_id))
        heapq.heappush(world.pool, end)
        world.pool_minutes += minutes
        world.job_done(run, JobStatus.UNSUCCESSFUL, end)
        logger.debug(f"{job.job_id} caught in the pre-run pool: {fault}")
        return

    minutes = min(config.prerun_window_min, job.ideal_duration)
    end = start + minutes
    heapq.heappush(world.pool, end)
    world.pool_minutes += minutes
    run.state = RunState.PRERUN
    world.queue.schedule(SimEvent(end, kind=EventKind.JOB_ARRIVAL, job_id=job.job_id, payload=SCREENED,
                                  token=run.token))
