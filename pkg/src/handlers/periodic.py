"""Periodic checks; each reschedules itself while unfinished jobs remain."""
import logging

from src.cluster import fragmentation_report
from src.handlers.execution import migrate, preempt
from src.scheduler import RunState

logger = logging.getLogger(__name__)


def preempt_check(world, ev):
    actions = world.scheduler.maybe_preempt(ev.time)
    for action in actions:
        preempt(world, world.scheduler.runs[action.job_id], ev.time, action.for_job)
    if actions:
        world.request_pass(ev.time)
    world.reschedule(ev)


def utilization_sample(world, ev):
    from src.simulation import ClusterTick

    report = fragmentation_report(world.state, world.topo)
    running = [run for run in world.scheduler.runs.values() if run.state is RunState.RUNNING]
    total_cores = sum(server.cpu_cores for server in world.topo.servers)
    reserved = sum(run.reserved_cores for run in running)
    on_hosts = sum(sum(run.host_cores.values()) for run in running)
    world.ticks.append(ClusterTick(time=ev.time, used_gpus=world.state.used_gpus,
                                   empty_server_fraction=report.empty_server_fraction,
                                   empty_servers_per_rack=report.empty_servers_per_rack,
                                   reserved_cores_fraction=reserved / total_cores if total_cores else 0.0,
                                   host_cores_fraction=on_hosts / total_cores if total_cores else 0.0))
    world.reschedule(ev)


def migration_check(world, ev):
    moves = world.scheduler.migration_check(ev.time)
    for run, old, new in moves:
        migrate(world, run, old, new, ev.time)
    if moves:
        logger.debug(f"{len(moves)} jobs migrated at {ev.time:.1f}")
        world.request_pass(ev.time)
    world.reschedule(ev)
