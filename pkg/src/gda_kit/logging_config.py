"""Logging configuration for gda-kit"""
import logging
import os
import sys
from typing import List, Optional

import structlog


def setup_logging(
    level: Optional[str] = None,
    log_file: Optional[str] = None,
    json: bool = False,
) -> structlog.stdlib.BoundLogger:
    """
    Set up logging configuration

    Args:
        level: Logging level (defaults to env var GDA_LOG_LEVEL or INFO)
        log_file: Optional log file path (defaults to env var GDA_LOG_FILE)
        json: Render events as JSON instead of key/value console lines

    Returns:
        Configured root logger for the package
    """
    log_level = (level or os.getenv("GDA_LOG_LEVEL", "INFO")).upper()
    log_file_path = log_file or os.getenv("GDA_LOG_FILE")

    # stdout carries reports, so logs go to stderr
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file_path:
        handlers.append(logging.FileHandler(log_file_path))

    root = logging.getLogger("gda_kit")
    root.handlers.clear()
    root.setLevel(getattr(logging, log_level))
    for handler in handlers:
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)
    root.propagate = False

    renderer = (
        structlog.processors.JSONRenderer()
        if json
        else structlog.processors.KeyValueRenderer(key_order=["timestamp", "level", "logger", "event"])
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="%Y-%m-%d %H:%M:%S"),
            structlog.processors.format_exc_info,
            renderer,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    logger = get_logger("logging")
    logger.debug("logging_initialized", level=log_level, log_file=log_file_path)
    return logger


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    """
    Get a logger instance with the module name

    Args:
        name: Module name (typically __name__)

    Returns:
        Logger instance
    """
    if not name.startswith("gda_kit"):
        name = f"gda_kit.{name}"
    return structlog.get_logger(name)
