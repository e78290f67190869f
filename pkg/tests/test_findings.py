"""
Directional checks against the shipped defaults (or a busier variant of them).
Each runs several full-size experiments, so they only run with --run-slow.
"""
from collections import defaultdict

import numpy as np
import pytest

from src.engine import run as run_events
from src.experiment import build_world, load_config, prepare, run_experiment
from src.workload import GpuBucket, bucket_of

SEEDS = range(5)
USER_ERRORS = ('Syntax error', 'Semantic error', 'Import error')

pytestmark = pytest.mark.slow


def _report(tmp_path, seed, scenario=None):
    overrides = {'report': {'harmless_replays': 0}}
    if scenario:
        overrides.update(scenario=scenario, scenarios={scenario: True})
    out = tmp_path / f"{scenario or 'baseline'}-{seed}"
    return run_experiment(load_config(overrides=overrides, seed=seed), str(out), record=False)


@pytest.fixture(scope='module')
def baselines(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp('baseline')
    return {seed: _report(tmp_path, seed) for seed in SEEDS}


def test_fragmentation_share_grows_with_job_size(baselines):
    shares = {}
    for bucket in ('B2_4', 'B5_8', 'B_GT8'):
        fragmentation = fair_share = 0
        for report in baselines.values():
            row = report['delay_causes']['by_bucket'].get(bucket)
            if row:
                fragmentation += row['fragmentation_jobs']
                fair_share += row['fair_share_jobs']
        shares[bucket] = fragmentation / (fragmentation + fair_share)
    assert shares['B2_4'] < shares['B5_8'] < shares['B_GT8']


def test_waiting_for_locality_trades_delay_for_speed(baselines, tmp_path):
    slowdown = {'baseline': 0.0, 'strict': 0.0}
    delay = {'baseline': 0.0, 'strict': 0.0}
    for seed in SEEDS:
        strict = _report(tmp_path, seed, 'wait_for_locality')
        for name, report in (('baseline', baselines[seed]), ('strict', strict)):
            slowdown[name] += report['placement']['by_bucket']['B_GT8']['mean_slowdown']
            delay[name] += report['queueing']['by_bucket']['B_GT8']['mean']
    assert slowdown['strict'] < slowdown['baseline']
    assert delay['strict'] > delay['baseline']


def test_dedicated_servers_remove_colocation(tmp_path):
    for seed in SEEDS:
        assert _report(tmp_path, seed, 'dedicated_servers')['placement']['colocated_placements'] == 0


def test_prerun_pool_removes_user_error_losses(baselines, tmp_path):
    def lost(report):
        reasons = report['failures']['reasons']
        return sum(reasons[r]['gpu_minutes_lost'] for r in USER_ERRORS if r in reasons)

    before = sum(lost(baselines[seed]) for seed in SEEDS)
    after = sum(lost(_report(tmp_path, seed, 'prerun_pool')) for seed in SEEDS)
    assert before > 0
    assert after <= 0.1 * before


def test_relaxed_big_jobs_do_not_wait_longer():
    # a busier cluster than the defaults, so that big jobs queue for capacity as well as for locality
    rates = {'vc1': 0.0192, 'vc2': 0.016, 'vc3': 0.0128, 'vc4': 0.0112}
    delays = defaultdict(list)
    for seed in SEEDS:
        config = load_config(overrides={'workload': {'arrival_rates': rates}}, seed=seed)
        world = build_world(prepare(config))
        result = run_events(world, config.engine_options().max_events)
        for run in result.runs.values():
            if bucket_of(run.job.gpu_demand) is GpuBucket.B_GT8 and run.queueing_delay is not None:
                delays[run.stage_at_start].append(run.queueing_delay)

    medians = [float(np.median(delays[stage])) for stage in sorted(delays) if len(delays[stage]) >= 20]
    assert len(medians) >= 2, {stage: len(d) for stage, d in delays.items()}
    assert all(later <= earlier + 1e-6 for earlier, later in zip(medians, medians[1:])), medians
