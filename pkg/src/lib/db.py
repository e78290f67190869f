import logging

from sqlalchemy.exc import SQLAlchemyError

from src.models import DBSession

logger = logging.getLogger(__name__)


def save_object(object):
    """Add and commit; a database failure is logged and never reaches the caller."""
    try:
        DBSession.add(object)
        DBSession.commit()
        return True
    except SQLAlchemyError as e:
        DBSession.rollback()
        logger.critical("Database error")
        logger.debug(f"Error message:\n{str(e)}")
        return False


def recent_runs(limit=20):
    from src.models import RunRecord
    try:
        return DBSession.query(RunRecord).order_by(RunRecord.id.desc()).limit(limit).all()
    except SQLAlchemyError as e:
        logger.critical("Database error")
        logger.debug(f"Error message:\n{str(e)}")
        return []
