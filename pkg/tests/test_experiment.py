import json
import os

import pytest
import yaml

from src import settings
from src.app import main
from src.experiment import config_hash, load_config, run_experiment
from src.lib.db import recent_runs
from src.lib.errors import ConfigError, IoError
from src.workload import serialize_trace
from tests.conftest import make_job, uniform_racks

SMALL = {
    'seed': 7,
    'topology': uniform_racks(2, 4, 8),
    'vcs': {'vc1': 32, 'vc2': 32},
    'workload': {'job_count': 80, 'arrival_rates': {'vc1': 0.05, 'vc2': 0.05}},
    'report': {'harmless_replays': 2},
}


def _write_config(tmp_path, data, name='experiment.yaml'):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture
def config_path(tmp_path):
    return _write_config(tmp_path, SMALL)


class TestLoadConfig:
    def test_user_values_win(self, config_path):
        config = load_config(config_path)
        assert config.seed == 7
        assert config.vcs == {'vc1': 32, 'vc2': 32}
        assert config.workload['job_count'] == 80
        # untouched sections keep the shipped defaults
        assert config.scheduler['acquisition_timeout_min'] == 2.5
        assert config.calibration == settings.DEFAULT_CALIBRATION

    def test_unknown_key(self, tmp_path):
        path = _write_config(tmp_path, dict(SMALL, scheduler={'bogus': 1}))
        with pytest.raises(ConfigError) as e:
            load_config(path)
        assert e.value.key == 'scheduler.bogus'

    def test_seed_required(self, tmp_path):
        data = {key: value for key, value in SMALL.items() if key != 'seed'}
        with pytest.raises(ConfigError) as e:
            load_config(_write_config(tmp_path, data))
        assert e.value.key == 'seed'
        assert load_config(_write_config(tmp_path, data), seed=3).seed == 3

    def test_rates_for_undeclared_vc(self, tmp_path):
        data = dict(SMALL, workload={'arrival_rates': {'vc9': 0.1}})
        with pytest.raises(ConfigError):
            load_config(_write_config(tmp_path, data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_config(str(tmp_path / 'absent.yaml'))

    def test_hash_follows_content(self, config_path):
        digest = config_hash(load_config(config_path))
        assert digest == config_hash(load_config(config_path))
        assert digest != config_hash(load_config(config_path, seed=8))
        assert len(digest) == 64


class TestRunExperiment:
    def test_outputs_and_record(self, config_path, tmp_path):
        config = load_config(config_path)
        report = run_experiment(config, str(tmp_path / 'a'))
        written = sorted(os.listdir(tmp_path / 'a'))
        assert written == ['delay_causes.csv', 'failures.csv', 'manifest.json', 'placement.csv', 'queueing.csv',
                           'report.json', 'status.csv']
        manifest = json.loads((tmp_path / 'a' / 'manifest.json').read_text())
        assert manifest['config_hash'] == config_hash(config)
        assert manifest['seed'] == 7
        assert report['meta']['jobs'] == 80
        assert report['out_of_order']['harmless']['evaluated'] <= 2

        latest = recent_runs(limit=1)[0]
        assert (latest.seed, latest.config_hash, latest.job_count) == (7, config_hash(config), 80)

    def test_report_is_byte_identical(self, config_path, tmp_path):
        config = load_config(config_path)
        run_experiment(config, str(tmp_path / 'a'), record=False)
        run_experiment(config, str(tmp_path / 'b'), record=False)
        assert (tmp_path / 'a' / 'report.json').read_bytes() == (tmp_path / 'b' / 'report.json').read_bytes()


class TestCli:
    def test_run(self, config_path, tmp_path):
        out = str(tmp_path / 'out')
        assert main(['run', '--config', config_path, '--out', out, '--no-record', '--scenario', 'migration']) == 0
        with open(os.path.join(out, 'report.json')) as f:
            assert json.load(f)['meta']['scenario'] == 'migration'

    def test_bad_config_exits_2(self, tmp_path):
        path = _write_config(tmp_path, dict(SMALL, engine={'turbo': True}))
        assert main(['run', '--config', path, '--out', str(tmp_path / 'out'), '--no-record']) == 2

    def test_replay(self, config_path, tmp_path):
        trace = tmp_path / 'trace.jsonl'
        jobs = [make_job(f"t{i}", vc='vc1', t=i * 3, demand=2 ** (i % 4), work=120) for i in range(10)]
        with open(trace, 'w') as f:
            serialize_trace(jobs, f)
        out = tmp_path / 'replay'
        assert main(['replay', '--trace', str(trace), '--config', config_path, '--out', str(out)]) == 0
        report = json.loads((out / 'report.json').read_text())
        assert report['meta']['jobs'] == 10
        assert report['status']['counts']['passed'] == 10

    def test_classify(self, tmp_path, capsys):
        log = tmp_path / 'job.log'
        log.write_text("Traceback (most recent call last):\n  File \"train.py\", line 3\n"
                       "ModuleNotFoundError: No module named 'horovod'\n")
        assert main(['classify', '--rules', settings.DEFAULT_RULES, '--log', str(log)]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result['reason'] == 'Import error'
        assert result['categories'] == ['IF', 'U']

    def test_classify_missing_rules_exits_3(self, tmp_path):
        log = tmp_path / 'job.log'
        log.write_text('nothing\n')
        assert main(['classify', '--rules', str(tmp_path / 'none.jsonl'), '--log', str(log)]) == 3

    def test_diff(self, config_path, tmp_path, capsys):
        config = load_config(config_path)
        run_experiment(config, str(tmp_path / 'a'), record=False)
        run_experiment(load_config(config_path, seed=9), str(tmp_path / 'b'), record=False)
        capsys.readouterr()
        assert main(['diff', str(tmp_path / 'a' / 'report.json'), str(tmp_path / 'b' / 'report.json')]) == 0
        comparison = json.loads(capsys.readouterr().out)
        assert comparison['paired'] is False
        assert 'status.counts.passed' in comparison['deltas']
