"""
Experiment plumbing: configuration loading, world construction, runs,
counterfactual replays and run records.
"""
import copy
import hashlib
import json
import logging
import os
import platform
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import scipy
import sqlalchemy
import yaml

from src import settings
from src.cluster import build_topology
from src.engine import run as run_events
from src.execution import Calibration, load_calibration
from src.failures import FailureProfile, LogCorpus, RuleSet, classify_log, load_failure_profile
from src.lib.db import save_object
from src.lib.errors import ConfigError, IoError
from src.metrics import build_report, write_report
from src.models import RunRecord, ensure_tables
from src.scheduler import SchedulerConfig
from src.simulation import EngineOptions, World
from src.workload import Job, WorkloadParams, generate_workload, parse_trace

logger = logging.getLogger(__name__)

# sections whose keys must already exist in the shipped defaults
STRICT_SECTIONS = ('scheduler', 'scenarios', 'engine', 'report')
# sections replaced wholesale by a user config
REPLACED_SECTIONS = ('topology', 'vcs')
FILE_KEYS = ('calibration', 'failure_profile', 'rules', 'log_corpus', 'trace')


def _read_yaml(path):
    try:
        with open(path, encoding='utf8') as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise IoError(path, e.strerror or str(e))
    except yaml.YAMLError as e:
        raise ConfigError("config", f"{path} is not valid YAML: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a mapping")
    return data


def merge_config(defaults, user):
    """Overlay `user` on `defaults`; unknown keys raise ConfigError with the dotted key."""
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(key)
        if key in STRICT_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "must be a mapping")
            for sub_key, sub_value in value.items():
                if sub_key not in defaults[key]:
                    raise ConfigError(f"{key}.{sub_key}")
                merged[key][sub_key] = sub_value
        elif key == 'workload' and isinstance(value, dict):
            # keys are checked by WorkloadParams
            merged[key] = dict(merged.get(key) or {}, **value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _resolve(value, base_dir):
    if value is None or os.path.isabs(value):
        return value
    if base_dir:
        candidate = os.path.join(base_dir, value)
        if os.path.exists(candidate):
            return os.path.abspath(candidate)
    return os.path.join(settings.DATA_DIR, value)


def _file_digest(path):
    try:
        with open(path, 'rb') as f:
            return hashlib.sha256(f.read()).hexdigest()
    except OSError as e:
        raise IoError(path, e.strerror or str(e))


@dataclass
class ExperimentConfig:
    seed: int
    scenario: str
    topology: list
    vcs: Dict[str, int]
    workload: dict
    scheduler: dict
    scenarios: dict
    engine: dict
    report: dict
    calibration: Optional[str] = None
    failure_profile: Optional[str] = None
    rules: Optional[str] = None
    log_corpus: Optional[str] = None
    trace: Optional[str] = None
    source: Optional[str] = None
    merged: dict = field(default_factory=dict, repr=False)

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig.from_dicts(self.scheduler, self.scenarios)

    def engine_options(self) -> EngineOptions:
        return EngineOptions(max_events=int(self.engine['max_events']),
                             audit_every=int(self.engine['audit_every']),
                             utilization_interval_min=float(self.engine['utilization_interval_min']),
                             utilization_samples_per_job=int(self.report['utilization_samples_per_job']))

    def hash(self):
        return config_hash(self)


def load_config(path=None, overrides=None, seed=None) -> ExperimentConfig:
    """
    Merge `path` (YAML) and then `overrides` (a dict) over the shipped defaults.

    :param seed: wins over any seed in the files; some seed is required
    """
    merged = _read_yaml(settings.DEFAULT_CONFIG)
    if path is not None:
        merged = merge_config(merged, _read_yaml(path))
    if overrides:
        merged = merge_config(merged, overrides)
    if seed is not None:
        merged['seed'] = seed
    if merged.get('seed') is None:
        raise ConfigError("seed", "a seed is required")
    try:
        merged['seed'] = int(merged['seed'])
    except (TypeError, ValueError):
        raise ConfigError("seed", "must be an integer")

    base_dir = os.path.dirname(os.path.abspath(path)) if path else None
    paths = {key: _resolve(merged.get(key), base_dir) for key in FILE_KEYS}
    for key, value in paths.items():
        if value is not None and not os.path.exists(value):
            raise IoError(value, f"{key} file does not exist")
    if not isinstance(merged.get('vcs'), dict) or not merged['vcs']:
        raise ConfigError("vcs", "at least one VC with a quota is required")
    if paths['trace'] is None:
        for vc_id in (merged.get('workload') or {}).get('arrival_rates', {}):
            if vc_id not in merged['vcs']:
                raise ConfigError(f"workload.arrival_rates.{vc_id}", "VC has no quota in vcs")

    return ExperimentConfig(seed=merged['seed'], scenario=str(merged.get('scenario') or 'baseline'),
                            topology=merged['topology'], vcs={str(k): int(v) for k, v in merged['vcs'].items()},
                            workload=merged.get('workload') or {}, scheduler=merged['scheduler'],
                            scenarios=merged['scenarios'], engine=merged['engine'], report=merged['report'],
                            source=os.path.abspath(path) if path else None, merged=merged, **paths)


def config_hash(config: ExperimentConfig):
    """SHA-256 over canonical JSON; referenced files count by content, not by path."""
    canonical = {key: value for key, value in config.merged.items() if key not in FILE_KEYS}
    for key in FILE_KEYS:
        path = getattr(config, key)
        canonical[key] = _file_digest(path) if path else None
    text = json.dumps(canonical, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(text.encode('utf8')).hexdigest()


@dataclass
class Inputs:
    """Everything a world is built from, loaded once and shared by replays."""
    config: ExperimentConfig
    topo: object
    jobs: List[Job]
    calibration: Calibration
    profile: Optional[FailureProfile]
    rules: Optional[RuleSet]
    corpus: Optional[LogCorpus]


def load_jobs(config: ExperimentConfig) -> List[Job]:
    if config.trace:
        try:
            with open(config.trace, encoding='utf8') as f:
                return parse_trace(f)
        except OSError as e:
            raise IoError(config.trace, e.strerror or str(e))
    return generate_workload(WorkloadParams.from_dict(config.workload, config.seed))


def prepare(config: ExperimentConfig) -> Inputs:
    return Inputs(config=config,
                  topo=build_topology(config.topology),
                  jobs=load_jobs(config),
                  calibration=load_calibration(config.calibration) if config.calibration else Calibration(),
                  profile=load_failure_profile(config.failure_profile) if config.failure_profile else None,
                  rules=RuleSet.load(config.rules) if config.rules else None,
                  corpus=LogCorpus.load(config.log_corpus) if config.log_corpus else None)


def build_world(inputs: Inputs, jobs=None) -> World:
    config = inputs.config
    return World(inputs.topo, inputs.jobs if jobs is None else jobs, config.vcs, config.scheduler_config(),
                 config.seed, calibration=inputs.calibration, profile=inputs.profile, rules=inputs.rules,
                 corpus=inputs.corpus, options=config.engine_options())


def _started(targets):
    def stop(world):
        runs = world.scheduler.runs
        return all(runs[job_id].first_start is not None for job_id in targets)
    return stop


def evaluate_harmless(inputs: Inputs, result, limit):
    """
    Replay the run without the job placed out of order and check whether any
    waiting large job would have started earlier.
    """
    candidates = [d for d in result.out_of_order.records if d.waiting_large]
    if not limit or not candidates:
        return {'evaluated': 0, 'harmless': 0, 'fraction': None}
    picks = sorted(set(np.linspace(0, len(candidates) - 1, min(limit, len(candidates))).round().astype(int)))
    max_events = inputs.config.engine_options().max_events
    harmless = 0
    for index in picks:
        decision = candidates[index]
        jobs = [job for job in inputs.jobs if job.job_id != decision.job_id]
        world = build_world(inputs, jobs)
        run_events(world, max_events, stop=_started(decision.waiting_large))
        replayed = world.scheduler.runs
        later = [job_id for job_id in decision.waiting_large
                 if replayed[job_id].first_start is not None
                 and result.runs[job_id].first_start > replayed[job_id].first_start + 1e-9]
        if not later:
            harmless += 1
        else:
            logger.debug(f"Placing {decision.job_id} at {decision.time:.1f} delayed {later}")
    return {'evaluated': len(picks), 'harmless': harmless, 'fraction': round(harmless / len(picks), 6)}


def versions():
    return {'python': platform.python_version(), 'numpy': np.__version__, 'scipy': scipy.__version__,
            'pyyaml': yaml.__version__, 'sqlalchemy': sqlalchemy.__version__}


def run_experiment(config: ExperimentConfig, out_dir, record=True):
    """Run, write report.json, the CSVs and manifest.json into `out_dir`; returns the report."""
    digest = config_hash(config)
    logger.info(f"Running '{config.scenario}' (seed {config.seed}, config {digest[:12]})")
    inputs = prepare(config)
    world = build_world(inputs)
    result = run_events(world, config.engine_options().max_events)
    harmless = evaluate_harmless(inputs, result, int(config.report['harmless_replays']))
    meta = {'scenario': config.scenario, 'seed': config.seed, 'config_hash': digest}
    report = build_report(result, meta, tuple(float(d) for d in config.report['convergence_deltas']), harmless)
    paths = write_report(report, out_dir)

    manifest = {'config_hash': digest, 'seed': config.seed, 'scenario': config.scenario,
                'config_source': config.source, 'versions': versions(), 'schema_version': settings.REPORT_SCHEMA_VERSION,
                'files': sorted(os.path.basename(p) for p in paths), 'config': config.merged}
    manifest_path = os.path.join(out_dir, 'manifest.json')
    try:
        with open(manifest_path, 'w', encoding='utf8') as f:
            json.dump(manifest, f, sort_keys=True, indent=2, default=str)
    except OSError as e:
        raise IoError(manifest_path, e.strerror or str(e))

    counts = report['status']['counts']
    logger.info(f"Finished '{config.scenario}': {counts['passed']} passed, {counts['killed']} killed, "
                f"{counts['unsuccessful']} unsuccessful, {report['meta']['events']} events")
    if record:
        ensure_tables()
        save_object(RunRecord(scenario=config.scenario, seed=config.seed, config_hash=digest,
                              job_count=report['meta']['jobs'], passed=counts['passed'], killed=counts['killed'],
                              unsuccessful=counts['unsuccessful'], events=report['meta']['events'],
                              out_dir=os.path.abspath(out_dir), created=datetime.utcnow()))
    return report


def replay(trace_path, config_path, out_dir, seed=None):
    """Run a recorded trace through the scheduler; the seed defaults to 0 when neither side gives one."""
    overrides = {'trace': os.path.abspath(trace_path)}
    try:
        config = load_config(config_path, overrides=overrides, seed=seed)
    except ConfigError as e:
        if e.key != 'seed':
            raise
        config = load_config(config_path, overrides=overrides, seed=0)
    return run_experiment(config, out_dir)


def classify_file(rules_path, log_path):
    rules = RuleSet.load(rules_path)
    try:
        with open(log_path, encoding='utf8', errors='replace') as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise IoError(log_path, e.strerror or str(e))
    return classify_log(lines, rules)
