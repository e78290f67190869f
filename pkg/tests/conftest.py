import os

# before anything imports src.settings
os.environ['SIM_DATABASE'] = 'sqlite://'

import pytest

from src.cluster import AllocationState, build_topology
from src.execution import Calibration, PlacementKind
from src.scheduler import Scheduler, SchedulerConfig
from src.workload import Job


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False, help='run full-size calibration tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def make_job(job_id, vc='vc1', t=0.0, demand=1, work=60.0, **kwargs):
    return Job(job_id=job_id, vc_id=vc, submit_time=float(t), gpu_demand=demand, work=float(work), **kwargs)


def flat_calibration():
    """Every placement runs at full speed."""
    return Calibration(throughput={kind: 100.0 for kind in PlacementKind},
                       spread_utilization={2: 40.0, 4: 40.0, 8: 40.0})


def uniform_racks(racks, servers, gpus, cpu_cores=64, mem_gb=512):
    return [{'rack_id': f"r{i}", 'servers': servers, 'gpus_per_server': gpus, 'cpu_cores': cpu_cores, 'mem_gb': mem_gb}
            for i in range(racks)]


class RecordingHooks:
    """Stands in for the world: records what the scheduler asks for."""

    def __init__(self):
        self.passes = []
        self.timeouts = []
        self.backoffs = []
        self.started = []

    def request_pass(self, t):
        self.passes.append(t)

    def timeout_at(self, run, attempt):
        self.timeouts.append((run.job_id, attempt.deadline))

    def backoff_until(self, run, t):
        self.backoffs.append((run.job_id, t))

    def start(self, run, placement, t):
        run.placement = placement
        run.segment_start = t
        self.started.append((run.job_id, placement, t))


@pytest.fixture
def scheduler_factory():
    def build(topology, quotas, **config):
        topo = build_topology(topology)
        hooks = RecordingHooks()
        scheduler = Scheduler(topo, AllocationState(topo), quotas, SchedulerConfig(**config), hooks)
        return scheduler, hooks
    return build


@pytest.fixture
def small_topology():
    return build_topology(uniform_racks(2, 2, 8))
