 # utils/logger.py
import logging

ROOT_LOGGER = "zfusion"
_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name=None, log_level=None):
    """Return a logger below the project root logger.

    The root handler is attached once; ``log_level`` accepts the usual names
    ('DEBUG', 'INFO', ...) and, when given, applies to the whole project.
    """
    root = logging.getLogger(ROOT_LOGGER)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(handler)
        root.setLevel(logging.INFO)
        root.propagate = False
    if log_level is not None:
        root.setLevel(log_level.upper() if isinstance(log_level, str) else log_level)
    if not name or name == ROOT_LOGGER:
        return root
    if name.startswith(ROOT_LOGGER + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")
