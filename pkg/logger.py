"""
Logging module for the ImpNovo sequencer
"""

import sys
from datetime import datetime
from typing import Any

import config

# Storage imports this module, so the sink is attached later
storage = None

_LEVELS = {"debug": 10, "info": 20, "warning": 30, "error": 40}


def init_storage(storage_instance):
    """Attach a run-directory storage as the log sink"""
    global storage
    storage = storage_instance


def detach_storage():
    global storage
    storage = None


def log_event(
    component: str,
    level: str,
    message: str,
    details: dict[str, Any] | None = None,
) -> bool:
    """
    Log an event to the diagnostic stream and the attached storage

    Args:
        component: The component generating the log (e.g., 'train', 'msio', 'cli')
        level: The log level ('debug', 'info', 'warning', 'error')
        message: The log message
        details: Additional structured fields

    Returns:
        bool: True if the entry was recorded, False otherwise
    """
    timestamp = datetime.now().isoformat()

    log_entry = {
        "timestamp": timestamp,
        "component": component,
        "level": level,
        "message": message,
    }

    if details:
        log_entry["details"] = details

    if _LEVELS.get(level, 20) >= _LEVELS[config.settings.log_level]:
        print(
            f"[{timestamp}] [{component}] [{level.upper()}] {message}",
            file=sys.stderr,
        )

    if storage is None:
        return _store_log_in_buffer(log_entry)

    return storage.add_log_entry(log_entry)


# Entries logged before a run directory exists
_log_buffer = []


def _store_log_in_buffer(log_entry: dict[str, Any]) -> bool:
    _log_buffer.append(log_entry)
    return True


def flush_log_buffer():
    """Flush buffered entries to storage once it's attached"""
    global _log_buffer

    if storage is None or not _log_buffer:
        return

    for log_entry in _log_buffer:
        storage.add_log_entry(log_entry)

    _log_buffer = []


def get_recent_logs(count=100, component=None, level=None):
    """Most recent buffered or stored entries, optionally filtered"""
    logs = storage.read_jsonl(config.settings.log_file) if storage else list(_log_buffer)
    if component:
        logs = [log for log in logs if log.get("component") == component]
    if level:
        logs = [log for log in logs if log.get("level") == level]
    return logs[-count:]
