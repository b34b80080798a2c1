import logging
import os

from rich.console import Console
from rich.logging import RichHandler

LOGGER_NAME = "omc"
LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


def level_from_verbosity(verbosity: int) -> int:
    """-vの数をログレベルにする. 指定がなければOMC_LOG_LEVELを見る."""
    if verbosity <= 0:
        env = os.environ.get("OMC_LOG_LEVEL")
        if env:
            level = logging.getLevelName(env.strip().upper())
            if isinstance(level, int):
                return level
        return logging.WARNING
    return LEVELS[min(verbosity, len(LEVELS) - 1)]


def setup_logging(level: int = logging.WARNING, console: Console | None = None) -> logging.Logger:
    """omcロガーにRichHandlerをひとつだけ付ける. 何度呼んでもハンドラは増えない."""
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)
    for handler in logger.handlers:
        if isinstance(handler, RichHandler):
            handler.setLevel(level)
            return logger
    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
    )
    handler.setLevel(level)
    logger.addHandler(handler)
    logger.propagate = False
    return logger
