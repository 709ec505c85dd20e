import os
import logging
from logging.handlers import RotatingFileHandler

import config

LOGGER_NAME = "PondSim"


def get_logger(module_name=None):
    """Child logger for a library module; handlers live on the root PondSim logger."""
    if not module_name:
        return logging.getLogger(LOGGER_NAME)
    return logging.getLogger(f"{LOGGER_NAME}.{module_name}")


def setup_logging(level=None, log_dir=None):
    log_dir = log_dir or config.LOG_DIR
    os.makedirs(log_dir, exist_ok=True)
    log_path = os.path.join(log_dir, config.LOG_FILE)

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, str(level or config.LOG_LEVEL).upper(), logging.INFO))

    if not logger.handlers:
        fh = RotatingFileHandler(log_path, maxBytes=config.LOG_MAX_BYTES,
                                 backupCount=config.LOG_BACKUP_COUNT)
        ch = logging.StreamHandler()
        fmt = logging.Formatter("%(asctime)s [%(levelname)s] %(message)s")
        fh.setFormatter(fmt)
        ch.setFormatter(fmt)
        logger.addHandler(fh)
        logger.addHandler(ch)
    return logger
