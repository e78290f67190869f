"""
Failure injection, retry policy and signature-based log classification.
"""
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
import yaml

from src.lib.errors import ConfigError, IoError
from src.workload import GpuBucket, JobStatus, bucket_of

logger = logging.getLogger(__name__)


class Category(Enum):
    IF = 'IF'
    AE = 'AE'
    U = 'U'

    def __str__(self):
        return self.value


class FailureReason(Enum):
    CPU_OOM = 'CPU out of memory'
    INCORRECT_INPUTS = 'Incorrect inputs'
    SEMANTIC = 'Semantic error'
    CORE_DUMP = 'Core dump'
    INVALID_MEM = 'Invalid mem access'
    MODEL_CKPT = 'Model ckpt error'
    CUDA_FAILURE = 'CUDA failure'
    SYNTAX = 'Syntax error'
    TRACEBACK = 'Traceback from crash'
    MPI_ERROR = 'MPI error'
    GPU_OOM = 'GPU out of memory'
    MPI_RUNTIME = 'MPI runtime failure'
    PERMISSION = 'Permission error'
    IMPORT = 'Import error'
    JOB_PREEMPTED = 'Job preempted'
    CUDA_INIT = 'CUDA init failed'
    MODEL_DIVERGED = 'Model diverged'
    CUDA_VERSION = 'CUDA ver. mismatch'
    GPU_ECC = 'GPU ECC error'
    OUTPUT_NODE = 'Output node error'
    CANNOT_LOAD_LIBS = 'Cannot load libs'
    NO_SIGNATURE = 'No signature'

    def __str__(self):
        return self.value


IF, AE, U = Category.IF, Category.AE, Category.U

CATEGORIES: Dict[FailureReason, FrozenSet[Category]] = {
    FailureReason.CPU_OOM: frozenset({AE, U}),
    FailureReason.INCORRECT_INPUTS: frozenset({IF, U}),
    FailureReason.SEMANTIC: frozenset({IF, U}),
    FailureReason.CORE_DUMP: frozenset({AE, U}),
    FailureReason.INVALID_MEM: frozenset({U}),
    FailureReason.MODEL_CKPT: frozenset({IF}),
    FailureReason.CUDA_FAILURE: frozenset({AE}),
    FailureReason.SYNTAX: frozenset({IF, U}),
    FailureReason.TRACEBACK: frozenset({IF, AE, U}),
    FailureReason.MPI_ERROR: frozenset({IF}),
    FailureReason.GPU_OOM: frozenset({AE}),
    FailureReason.MPI_RUNTIME: frozenset({IF}),
    FailureReason.PERMISSION: frozenset({U}),
    FailureReason.IMPORT: frozenset({IF, U}),
    FailureReason.JOB_PREEMPTED: frozenset({IF}),
    FailureReason.CUDA_INIT: frozenset({AE}),
    FailureReason.MODEL_DIVERGED: frozenset({U}),
    FailureReason.CUDA_VERSION: frozenset({AE}),
    FailureReason.GPU_ECC: frozenset({AE}),
    FailureReason.OUTPUT_NODE: frozenset({U}),
    FailureReason.CANNOT_LOAD_LIBS: frozenset({AE}),
    FailureReason.NO_SIGNATURE: frozenset(),
}

# user errors that fail the same way on every attempt
DETERMINISTIC_USER = frozenset({FailureReason.SYNTAX, FailureReason.SEMANTIC,
                                FailureReason.INCORRECT_INPUTS, FailureReason.IMPORT})

TABLE_REASONS = [r for r in FailureReason if r is not FailureReason.NO_SIGNATURE]

# demand columns of the profile: 1 GPU, 2-4 GPUs, more than 4
DEMAND_COLUMNS = ('1', '2-4', '>4')


def demand_column(gpu_demand):
    if gpu_demand <= 1:
        return 0
    return 1 if gpu_demand <= 4 else 2


@dataclass
class ReasonProfile:
    trials: float
    jobs: int = 0
    users: int = 0
    # 50th, 90th and 95th percentile minutes
    rtf: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    demand: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    rtf_demand_exponent: float = 0.0


@dataclass
class FailureProfile:
    reasons: Dict[FailureReason, ReasonProfile] = field(default_factory=dict)
    # per-attempt probability of a transient failure, before the bucket multiplier
    failure_probability: float = 0.08
    bucket_multiplier: Dict[GpuBucket, float] = field(default_factory=lambda: {
        GpuBucket.B1: 1.0, GpuBucket.B2_4: 1.4, GpuBucket.B5_8: 1.8, GpuBucket.B_GT8: 2.2})
    stickiness: float = 0.5
    sticky_modes: int = 2

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        profile = cls()
        for key, value in data.items():
            if key == 'reasons':
                for name, row in value.items():
                    try:
                        reason = FailureReason(name)
                    except ValueError:
                        raise ConfigError(f"failure_profile.reasons.{name}", "unknown failure reason")
                    unknown = set(row) - set(ReasonProfile.__dataclass_fields__)
                    if unknown:
                        raise ConfigError(f"failure_profile.reasons.{name}.{sorted(unknown)[0]}")
                    profile.reasons[reason] = ReasonProfile(
                        trials=float(row['trials']), jobs=int(row.get('jobs', 0)), users=int(row.get('users', 0)),
                        rtf=tuple(float(v) for v in row['rtf']), demand=tuple(float(v) for v in row['demand']),
                        rtf_demand_exponent=float(row.get('rtf_demand_exponent', 0.0)))
            elif key == 'bucket_multiplier':
                profile.bucket_multiplier = {GpuBucket[name]: float(v) for name, v in value.items()}
            elif key in ('failure_probability', 'stickiness'):
                setattr(profile, key, float(value))
            elif key == 'sticky_modes':
                profile.sticky_modes = int(value)
            else:
                raise ConfigError(f"failure_profile.{key}")
        profile.validate()
        return profile

    def validate(self):
        if not 0 <= self.failure_probability <= 1:
            raise ConfigError("failure_profile.failure_probability", "must be in [0, 1]")
        if not 0 <= self.stickiness <= 1 or self.sticky_modes < 0:
            raise ConfigError("failure_profile.stickiness", "must be in [0, 1] with sticky_modes >= 0")
        for reason, row in self.reasons.items():
            if row.trials < 0 or any(w < 0 for w in row.demand) or len(row.demand) != 3:
                raise ConfigError(f"failure_profile.reasons.{reason}", "weights must be three values >= 0")
            if len(row.rtf) != 3 or row.rtf[0] <= 0 or not row.rtf[0] <= row.rtf[1] <= row.rtf[2]:
                raise ConfigError(f"failure_profile.reasons.{reason}.rtf", "anchors must be positive and non-decreasing")


def load_failure_profile(path) -> FailureProfile:
    try:
        with open(path, encoding='utf8') as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise IoError(path, e.strerror or str(e))
    except yaml.YAMLError as e:
        raise ConfigError("failure_profile", f"{path} is not valid YAML: {e}")
    return FailureProfile.from_dict(data)


@dataclass
class FailureRecord:
    job_id: str
    attempt_index: int
    reason: FailureReason
    categories: FrozenSet[Category]
    rtf_minutes: float
    gpu_demand: int
    time: float
    user_id: Optional[str] = None
    # what was injected, when it differs from what the classifier found
    injected_reason: Optional[FailureReason] = None
    rule_id: Optional[str] = None


def rtf_quantile(anchors, u):
    """
    Inverse CDF through the 50/90/95th percentile anchors, log-linear between
    them (the 50-90 slope continues below the median) and exponential above
    the 95th.
    """
    p50, p90, p95 = anchors
    if u > 0.95:
        scale = (p95 - p90) / math.log(2)
        return p95 + scale * -math.log((1.0 - u) / 0.05)
    if u > 0.9:
        lo_u, hi_u, lo_x, hi_x = 0.9, 0.95, p90, p95
    else:
        lo_u, hi_u, lo_x, hi_x = 0.5, 0.9, p50, p90
    weight = (u - lo_u) / (hi_u - lo_u)
    return math.exp(math.log(lo_x) + weight * (math.log(hi_x) - math.log(lo_x)))


def sample_rtf(profile: FailureProfile, reason, rng, gpu_demand=1):
    row = profile.reasons[reason]
    # u in (0, 1)
    u = rng.random()
    while u <= 0.0:
        u = rng.random()
    return rtf_quantile(row.rtf, u) * gpu_demand ** row.rtf_demand_exponent


def _reason_weights(profile, candidates, gpu_demand):
    column = demand_column(gpu_demand) if gpu_demand is not None else None
    weights = []
    for reason in candidates:
        row = profile.reasons[reason]
        weights.append(row.demand[column] if column is not None else row.trials)
    return np.asarray(weights, dtype=float)


def draw_reason(profile: FailureProfile, rng, candidates, gpu_demand=None, user_modes=()):
    """Reason ∝ the demand-bucket counts, pulled toward the user's sticky modes."""
    candidates = [r for r in candidates if r in profile.reasons]
    sticky = [r for r in user_modes if r in candidates]
    if sticky and rng.random() < profile.stickiness:
        return sticky[int(rng.integers(len(sticky)))]
    weights = _reason_weights(profile, candidates, gpu_demand)
    if weights.sum() <= 0:
        weights = _reason_weights(profile, candidates, None)
    if not candidates or weights.sum() <= 0:
        return None
    return candidates[int(rng.choice(len(candidates), p=weights / weights.sum()))]


def user_modes(profile: FailureProfile, rng):
    """A user's sticky failure modes, drawn once per user."""
    candidates = [r for r in TABLE_REASONS if r is not FailureReason.JOB_PREEMPTED and r in profile.reasons]
    if not candidates or profile.sticky_modes == 0:
        return ()
    weights = _reason_weights(profile, candidates, None)
    count = min(profile.sticky_modes, int((weights > 0).sum()))
    picks = rng.choice(len(candidates), size=count, replace=False, p=weights / weights.sum())
    return tuple(candidates[i] for i in sorted(picks))


TRANSIENT_REASONS = [r for r in TABLE_REASONS if r not in DETERMINISTIC_USER and r is not FailureReason.JOB_PREEMPTED]
PERSISTENT_REASONS = [r for r in TABLE_REASONS if r is not FailureReason.JOB_PREEMPTED]


def persistent_fault(job, profile: FailureProfile, rng, modes=()):
    """The one fault an unsuccessful-target job hits on every attempt, or None."""
    if job.status_target is not JobStatus.UNSUCCESSFUL or profile.failure_probability == 0:
        return None
    return draw_reason(profile, rng, PERSISTENT_REASONS, job.gpu_demand, modes)


def sample_failure(job, profile: FailureProfile, rng, attempt_index=0, max_retries=None,
                   fault=None, modes=(), max_rtf=None):
    """
    Decide whether this attempt of `job` fails.

    :param fault: the job's persistent fault, if any; it fires on every attempt
    :param max_rtf: cap for the runtime to failure (the attempt's remaining run time)
    :return: (reason, rtf_minutes) or None
    """
    if profile.failure_probability == 0:
        return None
    if fault is not None:
        reason = fault
    else:
        # the last allowed attempt never fails transiently
        if max_retries is not None and attempt_index >= max_retries:
            return None
        probability = min(1.0, profile.failure_probability * profile.bucket_multiplier.get(bucket_of(job.gpu_demand), 1.0))
        if rng.random() >= probability:
            return None
        reason = draw_reason(profile, rng, TRANSIENT_REASONS, job.gpu_demand, modes)
        if reason is None:
            return None
    rtf = sample_rtf(profile, reason, rng, job.gpu_demand)
    if max_rtf is not None:
        rtf = min(rtf, max_rtf)
    return reason, max(rtf, 0.0)


class RetryPolicy(Enum):
    STATIC = 'static'
    ADAPTIVE = 'adaptive'

    def __str__(self):
        return self.value


class RetryAction(Enum):
    RETRY = 'retry'
    MARK_UNSUCCESSFUL = 'mark_unsuccessful'

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class RetryDecision:
    action: RetryAction
    backoff: float = 0.0


def apply_retry_policy(job, record: FailureRecord, policy: RetryPolicy, max_retries, backoff=0.0) -> RetryDecision:
    if policy is RetryPolicy.ADAPTIVE and record.reason in DETERMINISTIC_USER:
        return RetryDecision(RetryAction.MARK_UNSUCCESSFUL)
    if record.attempt_index >= max_retries:
        return RetryDecision(RetryAction.MARK_UNSUCCESSFUL)
    return RetryDecision(RetryAction.RETRY, backoff)


class PatternKind(Enum):
    SUBSTRING = 'substring'
    REGEX = 'regex'


@dataclass(frozen=True)
class SignatureRule:
    rule_id: str
    priority: int
    pattern: str
    pattern_kind: PatternKind
    reason: FailureReason

    def compile(self):
        if self.pattern_kind is PatternKind.REGEX:
            return re.compile(self.pattern, re.MULTILINE)
        return None


@dataclass(frozen=True)
class Classification:
    reason: FailureReason
    categories: FrozenSet[Category]
    rule_id: Optional[str]

    def as_dict(self):
        return {'reason': str(self.reason), 'categories': sorted(str(c) for c in self.categories), 'rule_id': self.rule_id}


class RuleSet:
    """Signature rules ordered by priority (lower is closer to the root cause)."""

    def __init__(self, rules):
        self.rules = sorted(rules, key=lambda r: (r.priority, r.rule_id))
        priorities = [r.priority for r in self.rules]
        if len(set(priorities)) != len(priorities):
            raise ConfigError("rules", "rule priorities must be unique")
        ids = [r.rule_id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ConfigError("rules", "rule ids must be unique")
        self._compiled = [(rule, rule.compile()) for rule in self.rules]
        missing = set(TABLE_REASONS) - {r.reason for r in self.rules}
        if missing:
            logger.warning(f"No signature rule for: {', '.join(sorted(str(r) for r in missing))}")

    def __len__(self):
        return len(self.rules)

    @classmethod
    def from_lines(cls, lines):
        rules = []
        for line_number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                rules.append(SignatureRule(rule_id=str(record['rule_id']),
                                           priority=int(record['priority']),
                                           pattern=str(record['pattern']),
                                           pattern_kind=PatternKind(record.get('pattern_kind', 'substring')),
                                           reason=FailureReason(record['reason'])))
            except (ValueError, KeyError, TypeError) as e:
                raise ConfigError(f"rules.line{line_number}", f"bad rule: {e}")
        try:
            return cls(rules)
        except re.error as e:
            raise ConfigError("rules", f"bad regular expression: {e}")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding='utf8') as f:
                return cls.from_lines(f.readlines())
        except OSError as e:
            raise IoError(path, e.strerror or str(e))

    def matches(self, text):
        for rule, compiled in self._compiled:
            if compiled is not None:
                if compiled.search(text):
                    yield rule
            elif rule.pattern in text:
                yield rule


def classify_log(lines, rules: RuleSet) -> Classification:
    """The lowest-priority-number matching rule wins; no match gives NoSignature."""
    text = lines if isinstance(lines, str) else '\n'.join(lines)
    best = next(rules.matches(text), None) if text else None
    if best is None:
        return Classification(FailureReason.NO_SIGNATURE, CATEGORIES[FailureReason.NO_SIGNATURE], None)
    return Classification(best.reason, CATEGORIES[best.reason], best.rule_id)


@dataclass
class LogCorpus:
    """Labeled failure logs; doubles as the template source for synthetic failure logs."""
    entries: List[Tuple[FailureReason, str]]

    @classmethod
    def load(cls, path):
        entries = []
        try:
            with open(path, encoding='utf8') as f:
                for line_number, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        entries.append((FailureReason(record['reason']), str(record['log'])))
                    except (ValueError, KeyError) as e:
                        raise ConfigError(f"log_corpus.line{line_number}", str(e))
        except OSError as e:
            raise IoError(path, e.strerror or str(e))
        return cls(entries)

    def by_reason(self):
        grouped = defaultdict(list)
        for reason, text in self.entries:
            grouped[reason].append(text)
        return grouped

    def render(self, reason, rng, **values):
        templates = self.by_reason().get(reason)
        if not templates:
            return ''
        template = templates[int(rng.integers(len(templates)))]
        return template.format_map(defaultdict(str, values))


def _percentiles(values):
    if not values:
        return [0.0, 0.0, 0.0]
    return [round(float(v), 2) for v in np.percentile(values, [50, 90, 95])]


def failure_stats(records: List[FailureRecord]):
    """Per-reason table mirroring the failure taxonomy columns, plus repetition factors."""
    grouped = defaultdict(list)
    for record in records:
        grouped[record.reason].append(record)
    total_rtf = sum(r.rtf_minutes for r in records)
    total_cost = sum(r.rtf_minutes * r.gpu_demand for r in records)

    table = {}
    for reason in sorted(grouped, key=lambda r: (-len(grouped[r]), r.value)):
        rows = grouped[reason]
        demand = [0, 0, 0]
        for r in rows:
            demand[demand_column(r.gpu_demand)] += 1
        rtf_sum = sum(r.rtf_minutes for r in rows)
        cost = sum(r.rtf_minutes * r.gpu_demand for r in rows)
        table[str(reason)] = {
            'categories': sorted(str(c) for c in CATEGORIES[reason]),
            'trials': len(rows),
            'jobs': len({r.job_id for r in rows}),
            'users': len({r.user_id for r in rows if r.user_id is not None}),
            'rtf_percentiles': _percentiles([r.rtf_minutes for r in rows]),
            'rtf_share': rtf_sum / total_rtf if total_rtf else 0.0,
            'demand': dict(zip(DEMAND_COLUMNS, demand)),
            'rtf_demand_share': cost / total_cost if total_cost else 0.0,
            'gpu_minutes_lost': cost,
        }

    top = list(table.items())[:8]
    job_factors = [row['trials'] / row['jobs'] for _, row in top if row['jobs']]
    user_factors = [row['trials'] / row['users'] for _, row in top if row['users']]
    return {
        'reasons': table,
        'total_failures': len(records),
        'repetition': {
            'per_job': float(np.mean(job_factors)) if job_factors else 0.0,
            'per_user': float(np.mean(user_factors)) if user_factors else 0.0,
        },
    }
