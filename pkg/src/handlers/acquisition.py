import logging

from src.lib.decorators import need_job

logger = logging.getLogger(__name__)


def sched_attempt(world, ev):
    world.pass_done(ev.time)
    world.scheduler.schedule_pass(ev.time)


@need_job
def acquisition_timeout(world, ev, run):
    released = world.scheduler.on_timeout(run.job_id, ev.time)
    # freed GPUs may let someone else in right away
    if released:
        world.request_pass(ev.time)


@need_job
def backoff_expired(world, ev, run):
    world.scheduler.on_backoff_expired(run.job_id, ev.time)
