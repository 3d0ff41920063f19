import logging
import sys
from pathlib import Path
from typing import Optional

import psutil

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    """Setup logging configuration"""
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, level.upper()))

    # Clear existing handlers
    logger.handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, level.upper()))
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        file_handler = logging.FileHandler(log_path)
        file_handler.setLevel(getattr(logging, level.upper()))
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.info("Logging system initialized")


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance"""
    return logging.getLogger(name)


def log_run_event(run_id: Optional[str], event_type: str, message: str,
                  level: str = "INFO", **kwargs):
    """Log an event of one command run and persist it to the run registry"""
    logger = get_logger("runs")

    extra_info = f"[{run_id}] {message}"
    if kwargs:
        extra_info += f" - {kwargs}"

    logger.log(getattr(logging, level.upper()), extra_info)

    if run_id is None:
        return

    from services.database import log_to_database
    log_to_database(
        run_id=run_id,
        log_type=event_type,
        message=message,
        severity=level.upper()
    )


def log_system_event(component: str, event_type: str, message: str,
                     level: str = "INFO", **kwargs):
    """Log a system event"""
    logger = get_logger("system")

    extra_info = f"[{component}] {event_type}: {message}"
    if kwargs:
        extra_info += f" - {kwargs}"

    logger.log(getattr(logging, level.upper()), extra_info)


def log_resources(component: str):
    """Log available memory and core counts at the start of a command"""
    memory = psutil.virtual_memory()
    log_system_event(
        component, "resources", "host resources",
        cores=psutil.cpu_count(logical=False),
        logical_cores=psutil.cpu_count(),
        available_mb=round(memory.available / 2**20),
    )
