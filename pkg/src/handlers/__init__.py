from src.engine import EventKind
from src.handlers.acquisition import acquisition_timeout, backoff_expired, sched_attempt
from src.handlers.arrival import job_arrival
from src.handlers.execution import failure_fired, job_finish
from src.handlers.periodic import migration_check, preempt_check, utilization_sample

HANDLERS = {
    EventKind.JOB_ARRIVAL: job_arrival,
    EventKind.SCHED_ATTEMPT: sched_attempt,
    EventKind.ACQUISITION_TIMEOUT: acquisition_timeout,
    EventKind.BACKOFF_EXPIRED: backoff_expired,
    EventKind.JOB_FINISH: job_finish,
    EventKind.FAILURE_FIRED: failure_fired,
    EventKind.PREEMPT_CHECK: preempt_check,
    EventKind.UTILIZATION_SAMPLE: utilization_sample,
    EventKind.MIGRATION_CHECK: migration_check,
}
