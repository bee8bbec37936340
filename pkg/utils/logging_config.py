"""
Logging Setup
Colored console logging plus an optional plain log file
"""

import logging
from typing import Optional

import colorlog

from config import config


CONSOLE_FORMAT = "%(log_color)s%(asctime)s %(levelname)-8s%(reset)s %(name)s: %(message)s"
FILE_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> logging.Logger:
    """
    Configure the root logger once

    Args:
        level: Level name; defaults to LOG_LEVEL from the environment
        log_file: Optional path for a plain-text copy of the log

    Returns:
        The root logger
    """
    root = logging.getLogger()
    root.setLevel((level or config.LOG_LEVEL).upper())

    for handler in list(root.handlers):
        if getattr(handler, '_cdrnn', False):
            root.removeHandler(handler)

    console = colorlog.StreamHandler()
    console.setFormatter(colorlog.ColoredFormatter(
        CONSOLE_FORMAT,
        datefmt="%H:%M:%S",
        log_colors={
            'DEBUG': 'cyan',
            'INFO': 'green',
            'WARNING': 'yellow',
            'ERROR': 'red',
            'CRITICAL': 'red,bg_white',
        },
    ))
    console._cdrnn = True
    root.addHandler(console)

    log_file = log_file if log_file is not None else config.LOG_FILE
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        file_handler._cdrnn = True
        root.addHandler(file_handler)

    return root
