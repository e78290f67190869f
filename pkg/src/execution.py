"""
Placement classification, slowdown and utilization calibration, and the
training-convergence model.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional

import numpy as np
import yaml
from scipy import optimize, stats

from src.cluster import AllocationState, Placement
from src.lib.errors import ConfigError, EmptyCurve, IoError, UnknownClass
from src.workload import JobStatus

logger = logging.getLogger(__name__)


class PlacementKind(Enum):
    SAME_SERVER = 'SameServer'
    DIFF_SERVER = 'DiffServer'
    INTRA_SERVER = 'IntraServer'
    INTER_SERVER = 'InterServer'

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class PlacementClass:
    kind: PlacementKind
    servers_used: int
    colocated: bool

    def __str__(self):
        label = str(self.kind) if self.servers_used <= 2 else f"{self.kind}/Spread{self.servers_used}"
        return label + ('+colocated' if self.colocated else '')


@dataclass(frozen=True)
class UtilizationSample:
    job_id: str
    minute: int
    percent: float


@dataclass
class Calibration:
    # relative training throughput per placement kind
    throughput: Dict[PlacementKind, float] = field(default_factory=lambda: {
        PlacementKind.SAME_SERVER: 114.8, PlacementKind.DIFF_SERVER: 98.0,
        PlacementKind.INTRA_SERVER: 75.6, PlacementKind.INTER_SERVER: 74.1})
    # GPU utilization measured in the same controlled experiment; reported, not used for sampling
    placement_utilization: Dict[PlacementKind, float] = field(default_factory=lambda: {
        PlacementKind.SAME_SERVER: 57.7, PlacementKind.DIFF_SERVER: 49.6,
        PlacementKind.INTRA_SERVER: 37.5, PlacementKind.INTER_SERVER: 36.5})
    # servers used -> mean utilization of large jobs
    spread_utilization: Dict[int, float] = field(default_factory=lambda: {2: 43.66, 4: 40.94, 8: 28.56})
    # GPU demand -> {passed, killed, unsuccessful, all} mean utilization
    size_utilization: Dict[int, Dict[str, float]] = field(default_factory=lambda: {
        1: {'passed': 53.51, 'killed': 37.02, 'unsuccessful': 62.82, 'all': 52.38},
        4: {'passed': 51.13, 'killed': 34.39, 'unsuccessful': 50.95, 'all': 45.18},
        8: {'passed': 51.09, 'killed': 60.63, 'unsuccessful': 64.34, 'all': 58.99},
        16: {'passed': 44.88, 'killed': 36.98, 'unsuccessful': 39.02, 'all': 40.39}})
    utilization_sigma: float = 15.0
    # static host observations: resource -> {mean, p50, p90}
    host_utilization: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        calibration = cls()
        for key, value in data.items():
            if key in ('throughput', 'placement_utilization'):
                table = {}
                for name, number in value.items():
                    try:
                        table[PlacementKind(name)] = float(number)
                    except ValueError:
                        raise ConfigError(f"calibration.{key}.{name}", "unknown placement kind")
                setattr(calibration, key, table)
            elif key == 'spread_utilization':
                calibration.spread_utilization = {int(n): float(v) for n, v in value.items()}
            elif key == 'size_utilization':
                calibration.size_utilization = {int(d): {str(s): float(v) for s, v in row.items()} for d, row in value.items()}
            elif key == 'utilization_sigma':
                calibration.utilization_sigma = float(value)
            elif key == 'host_utilization':
                calibration.host_utilization = {str(r): {str(k): float(v) for k, v in row.items()} for r, row in value.items()}
            else:
                raise ConfigError(f"calibration.{key}")
        calibration.validate()
        return calibration

    def validate(self):
        if PlacementKind.SAME_SERVER not in self.throughput:
            raise ConfigError("calibration.throughput.SameServer", "the reference class is required")
        reference = self.throughput[PlacementKind.SAME_SERVER]
        for kind, value in self.throughput.items():
            if value <= 0 or value > reference:
                raise ConfigError(f"calibration.throughput.{kind}", "must be in (0, SameServer]")
        means = list(self.spread_utilization.values())
        means += [v for row in self.size_utilization.values() for v in row.values()]
        if any(not 0 < v < 100 for v in means):
            raise ConfigError("calibration.size_utilization", "utilization means must be within (0, 100)")
        if not self.spread_utilization or not self.size_utilization:
            raise ConfigError("calibration.spread_utilization", "anchors must not be empty")
        if self.utilization_sigma <= 0:
            raise ConfigError("calibration.utilization_sigma", "must be > 0")


def load_calibration(path) -> Calibration:
    try:
        with open(path, encoding='utf8') as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise IoError(path, e.strerror or str(e))
    except yaml.YAMLError as e:
        raise ConfigError("calibration", f"{path} is not valid YAML: {e}")
    return Calibration.from_dict(data)


def log2_interpolate(anchors: Dict[int, float], x):
    """Linear in log2(x) between anchors, clamped outside them."""
    points = sorted(anchors.items())
    if x <= points[0][0]:
        return points[0][1]
    if x >= points[-1][0]:
        return points[-1][1]
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 <= x <= x1:
            weight = (math.log2(x) - math.log2(x0)) / (math.log2(x1) - math.log2(x0))
            return y0 + weight * (y1 - y0)


def placement_class(placement: Placement, state: AllocationState) -> PlacementClass:
    own_servers = placement.servers
    foreign = set()
    for server_id in own_servers:
        foreign |= state.holders_on(server_id)
    foreign.discard(placement.job_id)
    colocated = bool(foreign)

    if len(own_servers) == 1:
        return PlacementClass(PlacementKind.SAME_SERVER, 1, colocated)
    if not colocated:
        return PlacementClass(PlacementKind.DIFF_SERVER, len(own_servers), False)
    # a distributed neighbour shares the network as well as the host
    distributed_neighbour = any(len({s for s, _ in state.slots_of(job_id)}) > 1 for job_id in sorted(foreign))
    kind = PlacementKind.INTER_SERVER if distributed_neighbour else PlacementKind.INTRA_SERVER
    return PlacementClass(kind, len(own_servers), True)


def spread_penalty(servers_used, calibration: Calibration):
    """Extra slowdown of wide spreads relative to two servers, from the utilization anchors."""
    if servers_used <= 2:
        return 1.0
    base = log2_interpolate(calibration.spread_utilization, 2)
    return max(1.0, base / log2_interpolate(calibration.spread_utilization, servers_used))


def slowdown_factor(cls: PlacementClass, calibration: Calibration):
    """throughput(SameServer) / throughput(kind), times the spread penalty for wide jobs."""
    throughput = calibration.throughput
    reference = throughput[PlacementKind.SAME_SERVER]
    kind = cls.kind
    if kind not in throughput:
        kind = PlacementKind.DIFF_SERVER if PlacementKind.DIFF_SERVER in throughput else PlacementKind.SAME_SERVER
        logger.warning(f"{UnknownClass.__name__}: no throughput entry for {cls}, falling back to {kind}")
    return reference / throughput[kind] * spread_penalty(cls.servers_used, calibration)


@lru_cache(maxsize=256)
def truncnorm_location(mean, sigma, low=0.0, high=100.0):
    """Location of a normal truncated to [low, high] whose truncated mean is `mean`."""

    def gap(loc):
        a, b = (low - loc) / sigma, (high - loc) / sigma
        return stats.truncnorm.mean(a, b, loc=loc, scale=sigma) - mean

    span = high - low
    return optimize.brentq(gap, low - 2 * span, high + 2 * span, xtol=1e-10)


def utilization_mean(gpu_demand, servers_used, calibration: Calibration, status: Optional[JobStatus] = None):
    if gpu_demand > 8 and servers_used > 1:
        return log2_interpolate(calibration.spread_utilization, servers_used)
    column = str(status) if status is not None else 'all'
    rows = {demand: row.get(column, row.get('all')) for demand, row in calibration.size_utilization.items()}
    return log2_interpolate(rows, gpu_demand)


def sample_utilization(mean, sigma, size, rng) -> np.ndarray:
    """`size` draws in [0, 100] from a truncated normal whose mean is `mean`."""
    if size <= 0:
        return np.empty(0)
    loc = truncnorm_location(round(mean, 6), sigma)
    a, b = (0.0 - loc) / sigma, (100.0 - loc) / sigma
    values = stats.truncnorm.rvs(a, b, loc=loc, scale=sigma, size=int(size), random_state=rng)
    return np.clip(values, 0.0, 100.0)


def utilization_trace(job, cls: PlacementClass, rng, minutes, calibration: Calibration,
                      status: Optional[JobStatus] = None, start_minute=0) -> List[UtilizationSample]:
    """Per-minute samples from a truncated normal around the calibrated mean."""
    if minutes <= 0:
        return []
    mean = utilization_mean(job.gpu_demand, cls.servers_used, calibration, status)
    values = sample_utilization(mean, calibration.utilization_sigma, int(minutes), rng)
    return [UtilizationSample(job.job_id, start_minute + i, float(v)) for i, v in enumerate(values)]


def epochs_to_threshold(loss_curve, delta):
    """Fraction of epochs needed to first get within `delta` (relative) of the lowest loss."""
    if loss_curve is None or len(loss_curve) == 0:
        raise EmptyCurve("loss curve is empty")
    curve = np.asarray(loss_curve, dtype=float)
    lowest = curve.min()
    threshold = lowest * (1 + delta) if lowest >= 0 else lowest * (1 - delta)
    first = int(np.argmax(curve <= threshold))
    return (first + 1) / len(curve)


@dataclass
class ConvergenceReport:
    # status -> delta -> sorted fractions
    fractions: Dict[str, Dict[float, List[float]]]
    # status -> delta -> GPU minutes spent after the threshold epoch
    gpu_time_past: Dict[str, Dict[float, float]]
    gpu_time_total: Dict[str, float]
    # status -> delta -> mean per-job share of GPU time past the threshold
    mean_share_past: Dict[str, Dict[float, float]]


def convergence_report(entries, deltas=(0.0, 0.001)) -> ConvergenceReport:
    """
    :param entries: iterable of (status, loss_curve, gpu_minutes); entries without a curve are skipped
    """
    fractions, past, totals, shares = {}, {}, {}, {}
    for status, curve, gpu_minutes in entries:
        if not curve:
            continue
        key = str(status)
        totals[key] = totals.get(key, 0.0) + gpu_minutes
        for delta in deltas:
            fraction = epochs_to_threshold(curve, delta)
            fractions.setdefault(key, {}).setdefault(delta, []).append(fraction)
            past.setdefault(key, {}).setdefault(delta, 0.0)
            past[key][delta] += (1.0 - fraction) * gpu_minutes
            shares.setdefault(key, {}).setdefault(delta, []).append(1.0 - fraction)
    for per_delta in fractions.values():
        for values in per_delta.values():
            values.sort()
    mean_share = {key: {delta: float(np.mean(values)) for delta, values in per_delta.items()}
                  for key, per_delta in shares.items()}
    return ConvergenceReport(fractions=fractions, gpu_time_past=past, gpu_time_total=totals, mean_share_past=mean_share)

