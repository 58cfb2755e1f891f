import logging
from typing import Optional, Union

DEFAULT_FORMAT = "%(asctime)s-%(levelname)s: %(message)s"


def get_logger(
    name: str,
    level: Optional[Union[int, str]] = None,
    fmt: str = DEFAULT_FORMAT,
) -> logging.Logger:
    """
    Return a module logger with a single stream handler.

    Args:
        name: Logger name, usually ``__name__``.
        level: Level name or number. Defaults to ``settings.EMBER_LOG_LEVEL``.
        fmt: Record format for the attached handler.

    Returns:
        The configured logger. Repeated calls do not stack handlers.
    """
    if level is None:
        from src.config import settings

        level = settings.EMBER_LOG_LEVEL
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    logger = logging.getLogger(name)
    logger.setLevel(level)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(fmt=fmt))
        logger.addHandler(handler)
    logger.propagate = False
    return logger
