import io
import json
from collections import Counter

import pytest

from src.execution import epochs_to_threshold
from src.lib.errors import ConfigError, InvalidDistribution, NonMonotonicTimeWarning, SchemaError
from src.settings import WEEK_MIN
from src.workload import (CurveParams, GpuBucket, JobStatus, WorkloadParams, bucket_of, generate_workload,
                          parse_trace, serialize_trace, synthetic_loss_curve)


def _lines(*records):
    return io.StringIO('\n'.join(json.dumps(r) for r in records) + '\n')


class TestParseTrace:
    def test_valid_records(self):
        jobs = parse_trace(_lines(
            {'job_id': 'a', 'vc': 'vc1', 'submit_time': 0, 'gpu_demand': 1, 'work': 30},
            {'job_id': 'b', 'vc': 'vc2', 'submit_time': 1.5, 'gpu_demand': 16, 'work': 960,
             'status': 'killed', 'kill_time': 20, 'user': 'alice', 'extra': 'ignored'}))
        assert [j.job_id for j in jobs] == ['a', 'b']
        assert jobs[1].status_target is JobStatus.KILLED
        assert jobs[1].ideal_duration == 60.0
        assert jobs[1].user_id == 'alice'

    def test_blank_lines_skipped(self):
        stream = io.StringIO('\n{"job_id": "a", "vc": "v", "submit_time": 0, "gpu_demand": 2, "work": 4}\n\n')
        assert len(parse_trace(stream)) == 1

    def test_missing_field_named(self):
        with pytest.raises(SchemaError) as e:
            parse_trace(_lines({'job_id': 'a', 'vc': 'vc1', 'submit_time': 0, 'work': 30}))
        assert e.value.errors[0][0] == 1
        assert 'gpu_demand' in str(e.value)

    def test_wrong_type_and_bad_values(self):
        with pytest.raises(SchemaError) as e:
            parse_trace(_lines({'job_id': 'a', 'vc': 'vc1', 'submit_time': 0, 'gpu_demand': '4', 'work': 30},
                               {'job_id': 'b', 'vc': 'vc1', 'submit_time': 0, 'gpu_demand': 0, 'work': 30}))
        lines = [line for line, _ in e.value.errors]
        assert lines == [1, 2]

    def test_non_monotonic_times_resorted(self):
        with pytest.warns(NonMonotonicTimeWarning):
            jobs = parse_trace(_lines(
                {'job_id': 'a', 'vc': 'vc1', 'submit_time': 10, 'gpu_demand': 1, 'work': 1},
                {'job_id': 'b', 'vc': 'vc1', 'submit_time': 5, 'gpu_demand': 1, 'work': 1},
                {'job_id': 'c', 'vc': 'vc1', 'submit_time': 5, 'gpu_demand': 1, 'work': 1}))
        assert [j.job_id for j in jobs] == ['b', 'c', 'a']

    def test_serialized_trace_parses_back(self):
        params = WorkloadParams(job_count=50, arrival_rates={'vc1': 0.1, 'vc2': 0.1}, seed=4)
        jobs = generate_workload(params)
        stream = io.StringIO()
        serialize_trace(jobs, stream)
        stream.seek(0)
        assert parse_trace(stream) == jobs


class TestWorkloadParams:
    def test_unknown_key(self):
        with pytest.raises(ConfigError) as e:
            WorkloadParams.from_dict({'bogus': 1}, seed=0)
        assert e.value.key == 'workload.bogus'

    def test_shares_must_sum_to_one(self):
        with pytest.raises(InvalidDistribution):
            WorkloadParams.from_dict({'bucket_shares': {'B1': 0.5, 'B2_4': 0.2, 'B5_8': 0.1, 'B_GT8': 0.1}}, seed=0)

    def test_demand_outside_bucket(self):
        with pytest.raises(InvalidDistribution):
            WorkloadParams.from_dict({'bucket_demands': {'B1': {2: 1.0}}}, seed=0)


class TestGenerateWorkload:
    def test_deterministic(self):
        params = dict(job_count=200, arrival_rates={'vc1': 0.02, 'vc2': 0.01})
        assert generate_workload(WorkloadParams(seed=9, **params)) == generate_workload(WorkloadParams(seed=9, **params))
        assert generate_workload(WorkloadParams(seed=9, **params)) != generate_workload(WorkloadParams(seed=10, **params))

    def test_zero_jobs(self):
        assert generate_workload(WorkloadParams(job_count=0)) == []

    def test_submit_times_increase(self):
        jobs = generate_workload(WorkloadParams(job_count=300, seed=2, loss_curves=False))
        times = [j.submit_time for j in jobs]
        assert times == sorted(times)

    def test_distribution_targets(self):
        n = 10000
        jobs = generate_workload(WorkloadParams(job_count=n, arrival_rates={'vc1': 0.02, 'vc2': 0.03},
                                                seed=5, loss_curves=False))
        buckets = Counter(bucket_of(j.gpu_demand) for j in jobs)
        for bucket, share in WorkloadParams().bucket_shares.items():
            assert abs(buckets[bucket] / n - share) <= 0.02

        statuses = Counter(j.status_target for j in jobs)
        assert statuses[JobStatus.KILLED] == round(0.135 * n)
        assert statuses[JobStatus.UNSUCCESSFUL] == round(0.172 * n)

        tail = sum(1 for j in jobs if j.ideal_duration >= WEEK_MIN - 0.01) / n
        assert abs(tail - 0.005) <= 0.003

        for job in jobs:
            if job.status_target is JobStatus.KILLED:
                assert 0 <= job.kill_time <= job.ideal_duration + 1e-3
            assert job.vc_id in ('vc1', 'vc2')
            assert job.user_id.startswith(job.vc_id)

    def test_killed_jobs_lean_long(self):
        jobs = generate_workload(WorkloadParams(job_count=5000, seed=8, loss_curves=False))
        killed = [j.work for j in jobs if j.status_target is JobStatus.KILLED]
        passed = [j.work for j in jobs if j.status_target is JobStatus.PASSED]
        assert sum(killed) / len(killed) > sum(passed) / len(passed)

    def test_only_configured_buckets(self):
        params = WorkloadParams(job_count=500, seed=1, loss_curves=False,
                                bucket_shares={GpuBucket.B1: 0.5, GpuBucket.B2_4: 0.5,
                                               GpuBucket.B5_8: 0.0, GpuBucket.B_GT8: 0.0})
        assert {j.bucket for j in generate_workload(params)} == {GpuBucket.B1, GpuBucket.B2_4}


class TestLossCurves:
    def test_noiseless_curves_decrease_strictly(self):
        import numpy as np
        rng = np.random.default_rng(0)
        params = CurveParams(noisy_fraction=0.0)
        for _ in range(200):
            curve = synthetic_loss_curve(rng, params)
            assert all(b < a for a, b in zip(curve, curve[1:]))
            assert epochs_to_threshold(curve, 0.0) == 1.0

    def test_most_jobs_converge_early(self):
        jobs = generate_workload(WorkloadParams(job_count=2000, seed=3))
        passed = [j for j in jobs if j.status_target is JobStatus.PASSED]
        early = sum(1 for j in passed if epochs_to_threshold(j.loss_curve, 0.001) <= 0.45)
        assert early / len(passed) >= 0.70
