import logging
import os
from datetime import datetime, timezone

LOG_HISTORY_LIMIT = 500
LOG_FILE_NAME = "riskfilter.log"
ROOT_NAMESPACE = "RF"

event_log = []
_root_configured = False


class EventLogHandler(logging.Handler):
    """Keeps the most recent records in memory so a run can dump them."""

    def emit(self, record):
        entry = {
            "time": datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S"),
            "level": record.levelname,
            "source": record.name,
            "message": record.getMessage(),
        }

        event_log.append(entry)
        if len(event_log) > LOG_HISTORY_LIMIT:
            event_log.pop(0)


def setup_logging(log_dir=None, level=logging.INFO):
    """
    Configure root logger ONCE.
    All module loggers will inherit these handlers. A file handler is
    added the first time a log directory is given.
    """
    global _root_configured

    root = logging.getLogger()

    if not _root_configured:
        root.setLevel(level)
        formatter = logging.Formatter(
            "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
        )

        # --- Console ---
        ch = logging.StreamHandler()
        ch.setFormatter(formatter)

        # --- Memory ---
        eh = EventLogHandler()
        eh.setFormatter(formatter)

        root.handlers.clear()
        root.addHandler(ch)
        root.addHandler(eh)
        _root_configured = True

    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
        path = os.path.abspath(os.path.join(log_dir, LOG_FILE_NAME))
        known = {
            getattr(h, "baseFilename", None) for h in root.handlers
        }
        if path not in known:
            fh = logging.FileHandler(path)
            fh.setFormatter(root.handlers[0].formatter)
            root.addHandler(fh)

    return get_logger(ROOT_NAMESPACE)


def get_logger(name: str) -> logging.Logger:
    """
    Return a namespaced logger under RF.*
    Example:
        get_logger("particle_filter") -> RF.particle_filter
    """
    if not name.startswith(ROOT_NAMESPACE):
        name = f"{ROOT_NAMESPACE}.{name}"

    return logging.getLogger(name)


def recent_events(level=None):
    """Snapshot of the buffered records, optionally filtered by level name."""
    if level is None:
        return list(event_log)
    return [e for e in event_log if e["level"] == level]
