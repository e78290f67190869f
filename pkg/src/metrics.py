"""
Aggregate analyses over a finished run, the JSON/CSV report layout, and
report comparison.
"""
import csv
import json
import logging
import math
import os
from collections import Counter, defaultdict
from typing import Dict, List, Tuple

import numpy as np

from src import settings
from src.execution import convergence_report
from src.failures import failure_stats
from src.lib.errors import IoError, SchemaMismatch
from src.scheduler import DelayCause
from src.workload import JobStatus, bucket_of

logger = logging.getLogger(__name__)

STATUS_KEYS = [str(s) for s in JobStatus] + ['unfinished']
UTILIZATION_GRID = list(range(0, 101, 5))


def compute_cdf(samples) -> List[Tuple[float, float]]:
    """Empirical CDF at each distinct value; the last point is exactly 1.0."""
    values = sorted(float(v) for v in samples)
    if not values:
        return []
    n = len(values)
    points = []
    for i, value in enumerate(values):
        if i + 1 < n and values[i + 1] == value:
            continue
        points.append((value, (i + 1) / n))
    points[-1] = (points[-1][0], 1.0)
    return points


def _pcts(values, qs=(50, 90, 99)):
    if len(values) == 0:
        return {f"p{q}": None for q in qs}
    result = np.percentile(np.asarray(values, dtype=float), qs)
    return {f"p{q}": round(float(v), 6) for q, v in zip(qs, result)}


def _mean(values):
    return round(float(np.mean(values)), 6) if len(values) else None


def _status_key(run):
    return str(run.status) if run.status is not None else 'unfinished'


def _bucket_key(demand):
    return bucket_of(demand).name


def status_section(runs):
    counts = Counter(_status_key(run) for run in runs)
    gpu_minutes = defaultdict(float)
    for run in runs:
        gpu_minutes[_status_key(run)] += run.gpu_minutes
    total = sum(gpu_minutes.values())
    shares = {key: (100.0 * gpu_minutes[key] / total if total else (100.0 if key == 'passed' else 0.0))
              for key in STATUS_KEYS}
    return {
        'counts': {key: counts.get(key, 0) for key in STATUS_KEYS},
        'gpu_minutes': {key: round(gpu_minutes.get(key, 0.0), 6) for key in STATUS_KEYS},
        'gpu_time_share': {key: round(value, 6) for key, value in shares.items()},
        'non_passed_gpu_time_share': round(shares['killed'] + shares['unsuccessful'], 6),
    }


def queueing_section(runs):
    per_vc = defaultdict(lambda: defaultdict(list))
    per_bucket = defaultdict(list)
    for run in runs:
        delay = run.queueing_delay
        if delay is None:
            continue
        per_vc[run.job.vc_id][_bucket_key(run.job.gpu_demand)].append(delay)
        per_bucket[_bucket_key(run.job.gpu_demand)].append(delay)

    def summary(delays):
        return dict(count=len(delays), mean=_mean(delays), cdf=[[v, p] for v, p in compute_cdf(delays)], **_pcts(delays))

    return {
        'by_vc': {vc: {bucket: summary(d) for bucket, d in sorted(buckets.items())} for vc, buckets in sorted(per_vc.items())},
        'by_bucket': {bucket: summary(d) for bucket, d in sorted(per_bucket.items())},
    }


def delay_cause_section(runs):
    """Per bucket: how many delayed jobs saw each cause, and the split of waiting time."""
    rows = {}
    grouped = defaultdict(list)
    for run in runs:
        if run.first_start is not None:
            grouped[_bucket_key(run.job.gpu_demand)].append(run)
    total_time = Counter()
    for bucket, bucket_runs in sorted(grouped.items()):
        occurrences = Counter()
        time = Counter()
        delayed = 0
        for run in bucket_runs:
            by_cause = run.ledger.by_cause()
            if run.ledger.total() <= 0:
                continue
            delayed += 1
            for cause, minutes in by_cause.items():
                if minutes > 0:
                    occurrences[cause] += 1
                    time[cause] += minutes
        total_time.update(time)
        seen = occurrences[DelayCause.FAIR_SHARE] + occurrences[DelayCause.FRAGMENTATION]
        waited = time[DelayCause.FAIR_SHARE] + time[DelayCause.FRAGMENTATION]
        rows[bucket] = {
            'delayed_jobs': delayed,
            'fair_share_jobs': occurrences[DelayCause.FAIR_SHARE],
            'fragmentation_jobs': occurrences[DelayCause.FRAGMENTATION],
            'fragmentation_occurrence_share': round(occurrences[DelayCause.FRAGMENTATION] / seen, 6) if seen else None,
            'fragmentation_time_share': round(time[DelayCause.FRAGMENTATION] / waited, 6) if waited else None,
        }
    waited = total_time[DelayCause.FAIR_SHARE] + total_time[DelayCause.FRAGMENTATION]
    return {
        'by_bucket': rows,
        'fragmentation_time_share': round(total_time[DelayCause.FRAGMENTATION] / waited, 6) if waited else None,
    }


def out_of_order_section(stats, harmless=None):
    section = {
        'decisions': stats.decisions,
        'out_of_order': stats.out_of_order,
        'fraction': round(stats.fraction, 6),
        'with_large_waiting': sum(1 for d in stats.records if d.waiting_large),
    }
    section['harmless'] = harmless or {'evaluated': 0, 'harmless': 0, 'fraction': None}
    return section


def locality_delay_section(runs):
    """Queueing delay by the relaxation stage, and by the servers used, at first placement."""
    by_stage = defaultdict(lambda: defaultdict(list))
    by_servers = defaultdict(lambda: defaultdict(list))
    for run in runs:
        delay = run.queueing_delay
        if delay is None:
            continue
        bucket = _bucket_key(run.job.gpu_demand)
        by_stage[bucket][str(run.stage_at_start)].append(delay)
        by_servers[bucket][str(run.servers_at_start)].append(delay)

    def table(grouped):
        return {bucket: {key: dict(count=len(d), median=round(float(np.median(d)), 6), mean=_mean(d))
                         for key, d in sorted(keys.items(), key=lambda item: int(item[0]))}
                for bucket, keys in sorted(grouped.items())}

    return {'delay_by_stage': table(by_stage), 'delay_by_servers': table(by_servers)}


def placement_section(placements):
    by_bucket = defaultdict(list)
    for record in placements:
        by_bucket[_bucket_key(record.gpu_demand)].append(record)
    rows = {}
    for bucket, records in sorted(by_bucket.items()):
        rows[bucket] = {
            'placements': len(records),
            'kinds': dict(sorted(Counter(r.kind for r in records).items())),
            'colocated': sum(1 for r in records if r.colocated and r.servers_used > 1),
            'mean_slowdown': _mean([r.slowdown for r in records]),
            'mean_servers_used': _mean([r.servers_used for r in records]),
        }
    by_demand = defaultdict(list)
    for record in placements:
        by_demand[str(record.gpu_demand)].append(record.servers_used)
    return {
        'by_bucket': rows,
        'mean_servers_by_demand': {d: _mean(v) for d, v in sorted(by_demand.items(), key=lambda item: int(item[0]))},
        'colocated_placements': sum(1 for r in placements if r.colocated and r.servers_used > 1),
    }


def utilization_section(result):
    pooled = defaultdict(list)
    by_spread = defaultdict(list)
    for job_id, chunks in sorted(result.utilization.items()):
        run = result.runs[job_id]
        values = np.concatenate(chunks) if chunks else np.empty(0)
        bucket = _bucket_key(run.job.gpu_demand)
        pooled[(bucket, _status_key(run))].append(values)
        pooled[(bucket, 'all')].append(values)
        if run.job.gpu_demand > 8 and run.placement is not None:
            by_spread[str(run.placement.servers_used)].append(values)

    def summary(arrays):
        values = np.concatenate(arrays) if arrays else np.empty(0)
        if values.size == 0:
            return {'samples': 0, 'mean': None, 'cdf': []}
        fractions = np.searchsorted(np.sort(values), UTILIZATION_GRID, side='right') / values.size
        return dict(samples=int(values.size), mean=round(float(values.mean()), 6),
                    cdf=[[x, round(float(p), 6)] for x, p in zip(UTILIZATION_GRID, fractions)],
                    **_pcts(values, (10, 50, 90)))

    table = defaultdict(dict)
    for (bucket, status), arrays in sorted(pooled.items()):
        table[bucket][status] = summary(arrays)
    return {
        'by_bucket': dict(table),
        'large_jobs_by_servers': {k: summary(v) for k, v in sorted(by_spread.items(), key=lambda item: int(item[0]))},
    }


def convergence_section(runs, deltas):
    entries = [(run.status, run.job.loss_curve, run.gpu_minutes) for run in runs
               if run.status in (JobStatus.PASSED, JobStatus.KILLED) and run.job.loss_curve]
    report = convergence_report(entries, deltas)
    section = {}
    for status, per_delta in sorted(report.fractions.items()):
        total = report.gpu_time_total.get(status, 0.0)
        section[status] = {}
        for delta, fractions in sorted(per_delta.items()):
            past = report.gpu_time_past[status][delta]
            section[status][repr(float(delta))] = {
                'jobs': len(fractions),
                'median_fraction': round(float(np.median(fractions)), 6),
                'within_40pct_share': round(sum(1 for f in fractions if f <= 0.4) / len(fractions), 6),
                'cdf': [[round(v, 6), round(p, 6)] for v, p in compute_cdf(fractions)],
                'gpu_time_past_share': round(past / total, 6) if total else None,
                'mean_share_past': round(report.mean_share_past[status][delta], 6),
            }
    return section


def fragmentation_section(ticks, total_gpus):
    if not ticks:
        return {'samples': 0, 'mean_empty_server_fraction': None, 'mean_empty_servers_per_rack': {}}
    racks = sorted(ticks[0].empty_servers_per_rack)
    # ticks with the cluster roughly two-thirds busy
    busy = [t.empty_server_fraction for t in ticks if 0.6 <= t.used_gpus / total_gpus <= 0.73]
    return {
        'empty_server_fraction_at_two_thirds': _mean(busy),
        'samples': len(ticks),
        'mean_empty_server_fraction': _mean([t.empty_server_fraction for t in ticks]),
        'mean_empty_servers_per_rack': {r: _mean([t.empty_servers_per_rack[r] for t in ticks]) for r in racks},
        'mean_used_gpus': _mean([t.used_gpus for t in ticks]),
    }


def host_section(ticks, calibration):
    return {
        'mean_reserved_cores_fraction': _mean([t.reserved_cores_fraction for t in ticks]),
        'mean_host_cores_fraction': _mean([t.host_cores_fraction for t in ticks]),
        'observed': calibration.host_utilization,
    }


def build_report(result, meta, deltas=(0.0, 0.001), harmless=None) -> Dict:
    """
    :param result: SimResult of a terminated run
    :param meta: provenance: scenario, seed, config_hash
    """
    runs = [result.runs[job_id] for job_id in sorted(result.runs)]
    lost_preempted = sum(p.lost_gpu_minutes for p in result.preemptions)
    caught = Counter(str(r.reason) for r in result.pool_failures)
    final_servers = defaultdict(list)
    for run in runs:
        if run.placement is not None:
            final_servers[str(run.job.gpu_demand)].append(run.placement.servers_used)
    report = {
        'meta': dict(meta, schema_version=settings.REPORT_SCHEMA_VERSION, jobs=len(runs),
                     end_time=round(result.end_time, 6), events=result.events_dispatched,
                     stale_events=result.stale_events, audits=result.audits),
        'status': status_section(runs),
        'queueing': queueing_section(runs),
        'delay_causes': delay_cause_section(runs),
        'out_of_order': out_of_order_section(result.out_of_order, harmless),
        'locality': locality_delay_section(runs),
        'placement': dict(placement_section(result.placements),
                          mean_final_servers_by_demand={d: _mean(v) for d, v in
                                                        sorted(final_servers.items(), key=lambda item: int(item[0]))}),
        'utilization': utilization_section(result),
        'convergence': convergence_section(runs, deltas),
        'failures': failure_stats(result.failures),
        'fragmentation': fragmentation_section(result.ticks, result.topo.total_gpus),
        'host': host_section(result.ticks, result.calibration),
        'migration': {
            'count': len(result.migrations),
            'mean_servers_before': _mean([m.servers_before for m in result.migrations]),
            'mean_servers_after': _mean([m.servers_after for m in result.migrations]),
        },
        'preemption': {'count': len(result.preemptions), 'lost_gpu_minutes': round(lost_preempted, 6)},
        'prerun_pool': {'pool_minutes': round(result.pool_minutes, 6), 'caught': dict(sorted(caught.items()))},
    }
    return _plain(report)


def _plain(value):
    """numpy scalars and tuples to JSON types, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dump_report(report):
    return json.dumps(report, sort_keys=True, indent=2)


def _csv_rows(report):
    """Flat tables for the sections people plot."""
    queue_rows = [['vc', 'bucket', 'count', 'mean', 'p50', 'p90', 'p99']]
    for vc, buckets in report['queueing']['by_vc'].items():
        for bucket, row in buckets.items():
            queue_rows.append([vc, bucket, row['count'], row['mean'], row['p50'], row['p90'], row['p99']])
    cause_rows = [['bucket', 'delayed_jobs', 'fair_share_jobs', 'fragmentation_jobs',
                   'fragmentation_occurrence_share', 'fragmentation_time_share']]
    for bucket, row in report['delay_causes']['by_bucket'].items():
        cause_rows.append([bucket] + [row[k] for k in cause_rows[0][1:]])
    placement_rows = [['bucket', 'placements', 'colocated', 'mean_slowdown', 'mean_servers_used']]
    for bucket, row in report['placement']['by_bucket'].items():
        placement_rows.append([bucket] + [row[k] for k in placement_rows[0][1:]])
    failure_rows = [['reason', 'trials', 'jobs', 'users', 'rtf_p50', 'rtf_p90', 'rtf_p95', 'gpu_minutes_lost']]
    for reason, row in report['failures']['reasons'].items():
        failure_rows.append([reason, row['trials'], row['jobs'], row['users']] + row['rtf_percentiles'] + [row['gpu_minutes_lost']])
    status_rows = [['status', 'count', 'gpu_minutes', 'gpu_time_share']]
    for key in STATUS_KEYS:
        status = report['status']
        status_rows.append([key, status['counts'][key], status['gpu_minutes'][key], status['gpu_time_share'][key]])
    return {'queueing': queue_rows, 'delay_causes': cause_rows, 'placement': placement_rows,
            'failures': failure_rows, 'status': status_rows}


def write_report(report, out_dir):
    """report.json plus one CSV per flat section; returns the paths written."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = [os.path.join(out_dir, 'report.json')]
        with open(paths[0], 'w', encoding='utf8') as f:
            f.write(dump_report(report))
        for name, rows in _csv_rows(report).items():
            path = os.path.join(out_dir, f"{name}.csv")
            with open(path, 'w', encoding='utf8', newline='') as f:
                csv.writer(f).writerows(rows)
            paths.append(path)
    except OSError as e:
        raise IoError(out_dir, e.strerror or str(e))
    logger.info(f"Report written to {out_dir}")
    return paths


def load_report(path):
    try:
        with open(path, encoding='utf8') as f:
            return json.load(f)
    except OSError as e:
        raise IoError(path, e.strerror or str(e))
    except ValueError as e:
        raise IoError(path, f"not a JSON report: {e}")


def _numeric_leaves(value, prefix=''):
    if isinstance(value, dict):
        for key, child in value.items():
            yield from _numeric_leaves(child, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        yield prefix, float(value)


def diff_reports(a, b):
    """
    Per-metric deltas (b - a) over every numeric leaf outside the CDF arrays.

    Raises SchemaMismatch when the reports' schema versions differ or either has none.
    """
    meta_a, meta_b = a.get('meta') or {}, b.get('meta') or {}
    version_a, version_b = meta_a.get('schema_version'), meta_b.get('schema_version')
    if version_a is None or version_b is None:
        raise SchemaMismatch("both reports need meta.schema_version")
    if version_a != version_b:
        raise SchemaMismatch(f"schema version {version_a} vs {version_b}")
    left = dict(_numeric_leaves({k: v for k, v in a.items() if k != 'meta'}))
    right = dict(_numeric_leaves({k: v for k, v in b.items() if k != 'meta'}))
    deltas = {key: {'a': left[key], 'b': right[key], 'delta': right[key] - left[key]}
              for key in sorted(set(left) & set(right))}
    paired = meta_a.get('seed') == meta_b.get('seed')
    if not paired:
        logger.warning(f"Comparing runs with different seeds ({meta_a.get('seed')} vs {meta_b.get('seed')})")
    return {
        'paired': paired,
        'scenarios': [meta_a.get('scenario'), meta_b.get('scenario')],
        'deltas': deltas,
        'only_in_a': sorted(set(left) - set(right)),
        'only_in_b': sorted(set(right) - set(left)),
    }
