"""
Job model, JSONL trace ingestion and the calibrated synthetic workload.
"""
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from scipy import stats

from src.engine import RngStreams
from src.lib.errors import ConfigError, InvalidDistribution, NonMonotonicTimeWarning, SchemaError
from src.settings import MAX_RETRIES, WEEK_MIN

logger = logging.getLogger(__name__)


class GpuBucket(Enum):
    B1 = '1'
    B2_4 = '2-4'
    B5_8 = '5-8'
    B_GT8 = '>8'

    def __str__(self):
        return self.value


class JobStatus(Enum):
    PASSED = 'passed'
    KILLED = 'killed'
    UNSUCCESSFUL = 'unsuccessful'

    def __str__(self):
        return self.value


def bucket_of(demand) -> GpuBucket:
    if demand <= 1:
        return GpuBucket.B1
    if demand <= 4:
        return GpuBucket.B2_4
    if demand <= 8:
        return GpuBucket.B5_8
    return GpuBucket.B_GT8


@dataclass
class Job:
    job_id: str
    vc_id: str
    submit_time: float
    gpu_demand: int
    work: float
    status_target: Optional[JobStatus] = None
    # execution minutes after which a killed job is stopped
    kill_time: Optional[float] = None
    loss_curve: Optional[List[float]] = None
    max_retries: Optional[int] = None
    user_id: Optional[str] = None

    @property
    def bucket(self):
        return bucket_of(self.gpu_demand)

    @property
    def ideal_duration(self):
        return self.work / self.gpu_demand

    def problems(self):
        found = []
        if self.gpu_demand < 1:
            found.append("gpu_demand must be >= 1")
        if not self.work > 0:
            found.append("work must be > 0")
        if self.submit_time < 0:
            found.append("submit_time must be >= 0")
        if self.kill_time is not None and self.kill_time < 0:
            found.append("kill_time must be >= 0")
        if self.loss_curve is not None:
            if len(self.loss_curve) < 1:
                found.append("loss_curve must not be empty")
            elif not all(math.isfinite(v) for v in self.loss_curve):
                found.append("loss_curve values must be finite")
        if self.max_retries is not None and self.max_retries < 0:
            found.append("max_retries must be >= 0")
        return found


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_integer(value):
    return isinstance(value, int) and not isinstance(value, bool)


_REQUIRED = (
    ('job_id', str, 'string'),
    ('vc', str, 'string'),
    ('submit_time', _is_number, 'number'),
    ('gpu_demand', _is_integer, 'integer'),
    ('work', _is_number, 'number'),
)


def _record_to_job(record):
    if not isinstance(record, dict):
        return None, ["record is not an object"]
    errors = []
    for key, check, type_name in _REQUIRED:
        if key not in record:
            errors.append(f"missing field '{key}'")
            continue
        ok = isinstance(record[key], check) if isinstance(check, type) else check(record[key])
        if not ok:
            errors.append(f"field '{key}' must be a {type_name}")

    status = record.get('status')
    if status is not None:
        try:
            status = JobStatus(status)
        except ValueError:
            errors.append(f"field 'status' must be one of {[str(s) for s in JobStatus]}")
    if record.get('kill_time') is not None and not _is_number(record['kill_time']):
        errors.append("field 'kill_time' must be a number")
    curve = record.get('loss_curve')
    if curve is not None and (not isinstance(curve, list) or not all(_is_number(v) for v in curve)):
        errors.append("field 'loss_curve' must be an array of numbers")
    if record.get('max_retries') is not None and not _is_integer(record['max_retries']):
        errors.append("field 'max_retries' must be an integer")
    if record.get('user') is not None and not isinstance(record['user'], str):
        errors.append("field 'user' must be a string")
    if errors:
        return None, errors

    job = Job(job_id=record['job_id'],
              vc_id=record['vc'],
              submit_time=float(record['submit_time']),
              gpu_demand=record['gpu_demand'],
              work=float(record['work']),
              status_target=status,
              kill_time=float(record['kill_time']) if record.get('kill_time') is not None else None,
              loss_curve=[float(v) for v in curve] if curve is not None else None,
              max_retries=record.get('max_retries'),
              user_id=record.get('user'))
    return job, job.problems()


def parse_trace(stream) -> List[Job]:
    """
    Read one job per line. Blank lines are skipped, unknown keys ignored.

    Raises SchemaError listing every bad line; warns NonMonotonicTimeWarning
    (and sorts, stably) when submit times go backwards.
    """
    jobs = []
    errors = []
    seen = set()
    for line_number, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode('utf8')
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as e:
            errors.append((line_number, f"invalid JSON: {e}"))
            continue
        job, problems = _record_to_job(record)
        for problem in problems:
            errors.append((line_number, problem))
        if job is None or problems:
            continue
        if job.job_id in seen:
            errors.append((line_number, f"duplicate job_id '{job.job_id}'"))
            continue
        seen.add(job.job_id)
        jobs.append(job)

    if errors:
        raise SchemaError(errors)

    if any(b.submit_time < a.submit_time for a, b in zip(jobs, jobs[1:])):
        warnings.warn("trace submit times are not monotone; re-sorting", NonMonotonicTimeWarning)
        jobs.sort(key=lambda j: j.submit_time)
    logger.debug(f"Parsed {len(jobs)} jobs from trace")
    return jobs


def job_to_record(job: Job):
    record = {'job_id': job.job_id, 'vc': job.vc_id, 'submit_time': job.submit_time,
              'gpu_demand': job.gpu_demand, 'work': job.work}
    if job.status_target is not None:
        record['status'] = str(job.status_target)
    if job.kill_time is not None:
        record['kill_time'] = job.kill_time
    if job.loss_curve is not None:
        record['loss_curve'] = list(job.loss_curve)
    if job.max_retries is not None:
        record['max_retries'] = job.max_retries
    if job.user_id is not None:
        record['user'] = job.user_id
    return record


def serialize_trace(jobs, stream):
    for job in jobs:
        stream.write(json.dumps(job_to_record(job)) + '\n')


@dataclass
class CurveParams:
    epochs_min: int = 20
    epochs_max: int = 100
    plateau_min: float = 0.1
    plateau_max: float = 0.6
    noisy_fraction: float = 0.2
    noise: float = 2e-4
    # relative slope that keeps a noiseless curve improving until its last epoch
    drift: float = 1e-5


@dataclass
class WorkloadParams:
    job_count: int = 1000
    # jobs per minute, per VC
    arrival_rates: Dict[str, float] = field(default_factory=lambda: {'vc1': 0.01})
    bucket_shares: Dict[GpuBucket, float] = field(default_factory=lambda: {
        GpuBucket.B1: 0.55, GpuBucket.B2_4: 0.25, GpuBucket.B5_8: 0.13, GpuBucket.B_GT8: 0.07})
    # demand value -> weight inside each bucket
    bucket_demands: Dict[GpuBucket, Dict[int, float]] = field(default_factory=lambda: {
        GpuBucket.B1: {1: 1.0},
        GpuBucket.B2_4: {2: 0.7, 4: 0.3},
        GpuBucket.B5_8: {8: 1.0},
        GpuBucket.B_GT8: {16: 0.7, 32: 0.3}})
    # (median minutes, sigma) of the log-normal body of the ideal run time
    runtime: Dict[GpuBucket, tuple] = field(default_factory=lambda: {
        GpuBucket.B1: (45.0, 1.8), GpuBucket.B2_4: (90.0, 1.8),
        GpuBucket.B5_8: (180.0, 1.8), GpuBucket.B_GT8: (360.0, 1.8)})
    tail_fraction: float = 0.005
    tail_alpha: float = 1.5
    tail_max_min: float = 4 * WEEK_MIN
    killed_fraction: float = 0.135
    unsuccessful_fraction: float = 0.172
    kill_bias: float = 1.0
    users_per_vc: int = 20
    max_retries: int = MAX_RETRIES
    loss_curves: bool = True
    curve: CurveParams = field(default_factory=CurveParams)
    seed: int = 0

    @classmethod
    def from_dict(cls, data, seed):
        data = dict(data or {})
        params = cls(seed=seed)
        known = set(cls.__dataclass_fields__) - {'seed'}
        for key in data:
            if key not in known:
                raise ConfigError(f"workload.{key}")

        def buckets(key, convert):
            raw = data[key]
            result = {}
            for name, value in raw.items():
                try:
                    bucket = GpuBucket[name] if name in GpuBucket.__members__ else GpuBucket(str(name))
                except ValueError:
                    raise ConfigError(f"workload.{key}.{name}", "unknown GPU bucket")
                result[bucket] = convert(value)
            return result

        for key, value in data.items():
            if key == 'bucket_shares':
                params.bucket_shares = buckets(key, float)
            elif key == 'bucket_demands':
                params.bucket_demands = buckets(key, lambda v: {int(d): float(w) for d, w in v.items()})
            elif key == 'runtime':
                params.runtime = buckets(key, lambda v: (float(v['median']), float(v['sigma'])))
            elif key == 'curve':
                unknown = set(value) - set(CurveParams.__dataclass_fields__)
                if unknown:
                    raise ConfigError(f"workload.curve.{sorted(unknown)[0]}")
                params.curve = CurveParams(**value)
            elif key == 'arrival_rates':
                params.arrival_rates = {str(vc): float(rate) for vc, rate in value.items()}
            else:
                setattr(params, key, value)
        params.validate()
        return params

    def validate(self):
        def fail(key, message):
            raise InvalidDistribution(f"workload.{key}", message)

        if self.job_count < 0:
            fail('job_count', "must be >= 0")
        if not self.arrival_rates or any(rate <= 0 for rate in self.arrival_rates.values()):
            fail('arrival_rates', "need at least one VC with a positive rate")
        if any(share < 0 for share in self.bucket_shares.values()) or not math.isclose(sum(self.bucket_shares.values()), 1.0, abs_tol=1e-6):
            fail('bucket_shares', "shares must be >= 0 and sum to 1")
        for bucket, share in self.bucket_shares.items():
            if share == 0:
                continue
            demands = self.bucket_demands.get(bucket)
            if not demands:
                fail(f'bucket_demands.{bucket.name}', "no demand values")
            if any(bucket_of(d) is not bucket for d in demands):
                fail(f'bucket_demands.{bucket.name}', "demand outside its bucket")
            if any(w < 0 for w in demands.values()) or not math.isclose(sum(demands.values()), 1.0, abs_tol=1e-6):
                fail(f'bucket_demands.{bucket.name}', "weights must be >= 0 and sum to 1")
            if bucket not in self.runtime:
                fail(f'runtime.{bucket.name}', "missing")
            median, sigma = self.runtime[bucket]
            if median <= 0 or median >= WEEK_MIN or sigma <= 0:
                fail(f'runtime.{bucket.name}', "median must be in (0, one week) and sigma > 0")
        if not 0 <= self.tail_fraction < 1:
            fail('tail_fraction', "must be in [0, 1)")
        if self.tail_alpha <= 0 or self.tail_max_min <= WEEK_MIN:
            fail('tail_alpha', "alpha must be > 0 and tail_max_min beyond one week")
        if self.killed_fraction < 0 or self.unsuccessful_fraction < 0 or self.killed_fraction + self.unsuccessful_fraction > 1:
            fail('killed_fraction', "target fractions must be >= 0 and sum to <= 1")
        if self.users_per_vc < 1:
            fail('users_per_vc', "must be >= 1")
        curve = self.curve
        if not (1 <= curve.epochs_min <= curve.epochs_max) or not (0 < curve.plateau_min <= curve.plateau_max <= 1):
            fail('curve', "epochs and plateau ranges must be ordered and positive")
        if not 0 <= curve.noisy_fraction <= 1 or curve.noise < 0 or curve.drift < 0:
            fail('curve', "noise settings out of range")


def _categorical(rng, options, weights, size):
    weights = np.asarray(weights, dtype=float)
    return rng.choice(len(options), size=size, p=weights / weights.sum())


def sample_durations(rng, median, sigma, tail_fraction, tail_alpha, tail_max, size):
    """Ideal run times: log-normal body truncated at one week, Pareto tail beyond it."""
    in_tail = rng.random(size) < tail_fraction
    body_top = stats.norm.cdf((math.log(WEEK_MIN) - math.log(median)) / sigma)
    u = rng.random(size) * body_top
    body = median * np.exp(sigma * stats.norm.ppf(np.clip(u, 1e-300, None)))

    # truncated Pareto on [WEEK_MIN, tail_max]
    v = rng.random(size)
    span = 1.0 - (WEEK_MIN / tail_max) ** tail_alpha
    tail = WEEK_MIN * (1.0 - v * span) ** (-1.0 / tail_alpha)
    tail = np.maximum(tail, np.nextafter(WEEK_MIN, np.inf))

    durations = np.where(in_tail, tail, body)
    return np.maximum(durations, 0.01)


def synthetic_loss_curve(rng, params: CurveParams):
    """
    An exponential decay a + b*exp(-e/tau) that flattens, to within 0.01% of its
    asymptote, after a per-job plateau fraction of the epochs. A small linear
    drift keeps noiseless curves strictly decreasing.
    """
    epochs = int(rng.integers(params.epochs_min, params.epochs_max + 1))
    plateau = rng.uniform(params.plateau_min, params.plateau_max)
    floor = rng.uniform(0.5, 2.0)
    scale = floor * rng.uniform(1.0, 5.0)
    tau = max(plateau * epochs, 1.0) / math.log(scale / (floor * 1e-4))
    e = np.arange(epochs)
    curve = floor * (1.0 + params.drift * (epochs - 1 - e) / max(epochs - 1, 1)) + scale * np.exp(-e / tau)
    if rng.random() < params.noisy_fraction:
        curve = curve * (1.0 + rng.normal(0.0, params.noise, size=epochs))
    return [float(v) for v in curve]


def generate_workload(params: WorkloadParams) -> List[Job]:
    """Deterministic for a fixed params.seed."""
    params.validate()
    n = params.job_count
    if n == 0:
        return []
    streams = RngStreams(params.seed)

    # superposed per-VC Poisson arrivals
    vcs = sorted(params.arrival_rates)
    rates = np.array([params.arrival_rates[vc] for vc in vcs])
    arrivals = streams.get('workload', 'arrivals')
    submit = np.cumsum(arrivals.exponential(1.0 / rates.sum(), size=n))
    vc_index = _categorical(arrivals, vcs, rates, n)

    sizes = streams.get('workload', 'demand')
    buckets = [b for b in GpuBucket if params.bucket_shares.get(b, 0) > 0]
    bucket_index = _categorical(sizes, buckets, [params.bucket_shares[b] for b in buckets], n)
    demand = np.zeros(n, dtype=int)
    for i, bucket in enumerate(buckets):
        mask = bucket_index == i
        values = sorted(params.bucket_demands[bucket])
        picks = _categorical(sizes, values, [params.bucket_demands[bucket][v] for v in values], int(mask.sum()))
        demand[mask] = np.asarray(values)[picks]

    runtimes = streams.get('workload', 'runtime')
    duration = np.zeros(n)
    for i, bucket in enumerate(buckets):
        mask = bucket_index == i
        median, sigma = params.runtime[bucket]
        duration[mask] = sample_durations(runtimes, median, sigma, params.tail_fraction,
                                          params.tail_alpha, params.tail_max_min, int(mask.sum()))
    work = duration * demand

    # killed targets lean toward long jobs; unsuccessful ones are uniform over the rest
    outcomes = streams.get('workload', 'status')
    status = np.full(n, None, dtype=object)
    kill_time = np.full(n, None, dtype=object)
    killed_count = int(round(params.killed_fraction * n))
    if killed_count:
        weights = work ** params.kill_bias
        killed = outcomes.choice(n, size=killed_count, replace=False, p=weights / weights.sum())
        status[killed] = JobStatus.KILLED
        kill_time[killed] = duration[killed] * outcomes.uniform(0.5, 1.0, size=killed_count)
    unsuccessful_count = int(round(params.unsuccessful_fraction * n))
    if unsuccessful_count:
        rest = np.flatnonzero(status == None)  # noqa: E711
        unsuccessful = outcomes.choice(rest, size=min(unsuccessful_count, len(rest)), replace=False)
        status[unsuccessful] = JobStatus.UNSUCCESSFUL
    status[status == None] = JobStatus.PASSED  # noqa: E711

    users = streams.get('workload', 'users')
    user_weights = 1.0 / np.arange(1, params.users_per_vc + 1)
    user_index = _categorical(users, range(params.users_per_vc), user_weights, n)

    curves = streams.get('workload', 'curves')
    width = len(str(n - 1))
    jobs = []
    for i in range(n):
        vc = vcs[vc_index[i]]
        jobs.append(Job(job_id=f"j{i:0{width}d}",
                        vc_id=vc,
                        submit_time=round(float(submit[i]), 3),
                        gpu_demand=int(demand[i]),
                        work=round(float(work[i]), 3),
                        status_target=status[i],
                        kill_time=round(float(kill_time[i]), 3) if kill_time[i] is not None else None,
                        loss_curve=synthetic_loss_curve(curves, params.curve) if params.loss_curves else None,
                        max_retries=params.max_retries,
                        user_id=f"{vc}-u{user_index[i]}"))
    logger.info(f"Generated {n} synthetic jobs over {len(vcs)} VCs (seed {params.seed})")
    return jobs
