import argparse
import json
import logging
import sys

import coloredlogs

from src.experiment import classify_file, load_config, replay, run_experiment
from src.lib.decorators import cli_errors
from src.metrics import diff_reports, load_report
from src.settings import LOG_LEVEL

logger = logging.getLogger(__name__)

# COMMANDS


@cli_errors
def run_command(args):
    overrides = {'scenario': args.scenario, 'scenarios': {args.scenario: True}} if args.scenario else None
    config = load_config(args.config, overrides=overrides, seed=args.seed)
    run_experiment(config, args.out, record=not args.no_record)


@cli_errors
def replay_command(args):
    replay(args.trace, args.config, args.out, seed=args.seed)


@cli_errors
def classify_command(args):
    classification = classify_file(args.rules, args.log)
    print(json.dumps(classification.as_dict(), sort_keys=True))


@cli_errors
def diff_command(args):
    comparison = diff_reports(load_report(args.report_a), load_report(args.report_b))
    print(json.dumps(comparison, sort_keys=True, indent=2))


def build_parser():
    parser = argparse.ArgumentParser(prog='sim', description='GPU cluster scheduling simulator')
    commands = parser.add_subparsers(dest='command')
    commands.required = True

    run_parser = commands.add_parser('run', help='run a baseline or scenario experiment')
    run_parser.add_argument('--config', help='experiment YAML, merged over the shipped defaults')
    run_parser.add_argument('--seed', type=int, help='master seed (required here or in the config)')
    run_parser.add_argument('--out', required=True, help='output directory')
    run_parser.add_argument('--scenario', choices=['wait_for_locality', 'migration', 'dedicated_servers',
                                                   'prerun_pool', 'adaptive_retries'],
                            help='switch one scenario flag on and name the run after it')
    run_parser.add_argument('--no-record', action='store_true', help='do not add the run to the history database')
    run_parser.set_defaults(func=run_command)

    replay_parser = commands.add_parser('replay', help='replay a JSONL job trace')
    replay_parser.add_argument('--trace', required=True)
    replay_parser.add_argument('--config')
    replay_parser.add_argument('--seed', type=int)
    replay_parser.add_argument('--out', required=True)
    replay_parser.set_defaults(func=replay_command)

    classify_parser = commands.add_parser('classify', help='classify one failure log')
    classify_parser.add_argument('--rules', required=True)
    classify_parser.add_argument('--log', required=True)
    classify_parser.set_defaults(func=classify_command)

    diff_parser = commands.add_parser('diff', help='compare two reports')
    diff_parser.add_argument('report_a')
    diff_parser.add_argument('report_b')
    diff_parser.set_defaults(func=diff_command)
    return parser


def main(argv=None):
    coloredlogs.install(level=LOG_LEVEL)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
