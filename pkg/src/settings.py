import logging.config
import os
from os import path

PROJECT_ROOT = path.dirname(path.realpath(__file__))
DATA_DIR = path.join(PROJECT_ROOT, 'data')
LOG_DIR = path.join(PROJECT_ROOT, '..', 'logs')
DATABASE = os.environ.get('SIM_DATABASE', 'sqlite:///' + path.join(PROJECT_ROOT, '..', 'runs.db'))

DEFAULT_CONFIG = path.join(DATA_DIR, 'default.yaml')
DEFAULT_CALIBRATION = path.join(DATA_DIR, 'calibration.yaml')
DEFAULT_FAILURE_PROFILE = path.join(DATA_DIR, 'failure_profile.yaml')
DEFAULT_RULES = path.join(DATA_DIR, 'rules.jsonl')
DEFAULT_LOG_CORPUS = path.join(DATA_DIR, 'log_corpus.jsonl')

REPORT_SCHEMA_VERSION = 1

# Scheduler defaults, all overridable from the experiment config
ACQUISITION_TIMEOUT_MIN = 2.5
BACKOFF_MIN = 2.0
RELAX_AFTER = 3
PREEMPT_THRESHOLD = 0.90
CHECKPOINT_INTERVAL_MIN = 30.0
MAX_RETRIES = 5
MAX_EVENTS = 20_000_000

# One week, the boundary of the run-time tail
WEEK_MIN = 7 * 24 * 60

LOG_LEVELS = {
    'error': 'ERROR',
    'warn': 'WARNING',
    'info': 'INFO',
    'debug': 'DEBUG',
}
LOG_LEVEL = LOG_LEVELS.get(os.environ.get('SIM_LOG_LEVEL', 'info').lower(), 'INFO')

if not path.exists(LOG_DIR):
    os.makedirs(LOG_DIR, exist_ok=True)

logging.config.dictConfig({
                            'version': 1,
                            'disable_existing_loggers': False,
                            'formatters': {
                                'default': {
                                    'format': '%(asctime)s-%(name)s-%(levelname)s-%(message)s'
                                },
                            },
                            'handlers': {
                                'console': {
                                    'level': LOG_LEVEL,
                                    'formatter': 'default',
                                    'class': 'logging.StreamHandler',
                                },
                                'deb_file': {
                                    'level': 'DEBUG',
                                    'formatter': 'default',
                                    'class': 'logging.handlers.RotatingFileHandler',
                                    'maxBytes': 10485760,  # 10MB
                                    'backupCount': 10,
                                    'encoding': 'utf8',
                                    'filename': path.join(LOG_DIR, 'app.log')
                                },
                                'err_file': {
                                    'level': 'ERROR',
                                    'formatter': 'default',
                                    'class': 'logging.handlers.RotatingFileHandler',
                                    'maxBytes': 10485760,  # 10MB
                                    'backupCount': 5,
                                    'encoding': 'utf8',
                                    'filename': path.join(LOG_DIR, 'error.log')
                                },
                            },
                            'loggers': {
                                '': {
                                    'handlers': ['console', 'deb_file', 'err_file'],
                                    # per-event debug lines only when asked for
                                    'level': 'DEBUG' if LOG_LEVEL == 'DEBUG' else 'INFO',
                                    'propagate': True
                                },
                            }
                        })

if os.environ.get('SIM_LOG_LEVEL', 'info').lower() not in LOG_LEVELS:
    logging.getLogger(__name__).warning(f"Unknown SIM_LOG_LEVEL '{os.environ['SIM_LOG_LEVEL']}', using info")

try:
    from src.local_settings import *
except ImportError:
    pass
