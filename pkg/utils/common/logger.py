"""
Logging configuration for the transformable NAS pipeline.
"""

import logging
import sys
from pathlib import Path
from typing import Optional

APP_LOGGER_NAME = "transformable_nas"

# Package prefixes whose module loggers are routed to the application handlers
_ROUTED_PREFIXES = ("utils", "workflows", "data", "app", "tests")


def setup_logger(
    name: str = APP_LOGGER_NAME,
    log_level: str = "INFO",
    log_to_file: bool = False,
    log_file: str = "transformable_nas.log"
) -> logging.Logger:
    """
    Set up and configure the application logger.

    Args:
        name: Logger name
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_to_file: Whether to also log to a file
        log_file: Log file path

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()
    logger.propagate = False

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    simple_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s',
        datefmt='%H:%M:%S'
    )

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logger.level)
    console_handler.setFormatter(simple_formatter)
    logger.addHandler(console_handler)

    if log_to_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        file_handler = logging.FileHandler(log_path, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed_formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """
    Get a logger that writes through the application handlers.

    Module loggers are created as children of the application logger so that a
    single ``setup_logger`` call controls every module.

    Args:
        name: Module name (usually ``__name__``)

    Returns:
        Logger instance
    """
    app_logger = logging.getLogger(APP_LOGGER_NAME)
    if not app_logger.handlers:
        setup_logger(APP_LOGGER_NAME)

    if name is None or name == APP_LOGGER_NAME:
        return app_logger
    if name.startswith(APP_LOGGER_NAME + "."):
        return logging.getLogger(name)
    if name == "__main__" or name.split(".")[0] in _ROUTED_PREFIXES:
        return logging.getLogger(f"{APP_LOGGER_NAME}.{name}")
    return logging.getLogger(name)
