import sys

from loguru import logger

from src.conf.config import config


def configure_logging(level: str | None = None, log_file: str | None = None) -> None:
    """
    Installs the loguru sinks used by the CLI.

    The default loguru sink is replaced by a stderr sink at the requested level; when a log
    file is configured a second sink writes the same records there.

    Args:
        level (str | None): Minimum level. Defaults to ``config.LOG_LEVEL``.
        log_file (str | None): Optional path of a log file. Defaults to ``config.LOG_FILE``.

    Returns:
        None
    """
    level = (level or config.LOG_LEVEL).upper()
    log_file = log_file or config.LOG_FILE
    logger.remove()
    logger.add(
        sys.stderr,
        level=level,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{function} - {message}",
    )
    if log_file:
        logger.add(log_file, level=level, enqueue=False)
