import logging
from functools import wraps

from src.lib.errors import ConfigError, IoError, SchemaError, SchemaMismatch, SimError

logger = logging.getLogger(__name__)


def need_job(func):
    """Resolve the event's job run; drop events scheduled for an earlier segment of it."""
    @wraps(func)
    def wrapped(world, ev, *args, **kwargs):
        run = world.scheduler.runs.get(ev.job_id)
        if run is None:
            logger.warning(f"{ev.kind} for unknown job {ev.job_id} dropped")
            return
        if ev.token != run.token:
            world.stale_events += 1
            return
        return func(world, ev, run, *args, **kwargs)
    return wrapped


EXIT_CODES = (
    (ConfigError, 2),
    (SchemaError, 2),
    (SchemaMismatch, 2),
    (IoError, 3),
    (SimError, 1),
)


def exit_code_for(error):
    for error_class, code in EXIT_CODES:
        if isinstance(error, error_class):
            return code
    return 1


def cli_errors(func):
    """Turn domain errors into a logged message and the matching exit code."""
    @wraps(func)
    def wrapped(*args, **kwargs):
        try:
            return func(*args, **kwargs) or 0
        except (ConfigError, SchemaError, SchemaMismatch, IoError, SimError) as e:
            logger.error(f"{func.__name__} failed: {e}")
            logger.debug("Traceback:", exc_info=True)
            return exit_code_for(e)
        except KeyboardInterrupt:
            logger.warning("Interrupted")
            return 130
    return wrapped
