import logging

import coloredlogs

from src.models import engine, ensure_tables
from src.settings import LOG_LEVEL

logger = logging.getLogger(__name__)


def main():
    coloredlogs.install(level=LOG_LEVEL)
    ensure_tables()
    logger.info(f"Run history tables ready at {engine.url}")


if __name__ == "__main__":
    # Init DB
    main()
