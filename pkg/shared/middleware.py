"""
fgvis — Shared Middleware for Commands

Provides:
  - Run ID generation and propagation (also into worker threads)
  - Structured JSON logging to stderr
  - Command timing / audit instrumentation
  - Order-preserving parallel map over independent work items

Usage in command handlers:
    from shared.middleware import audited_command, audit_log

    @audited_command("explain")
    def cmd_explain(args): ...
"""

import contextvars
import functools
import json
import logging
import os
import sys
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

# ---------------------------------------------------------------------------
# Run ID context
# ---------------------------------------------------------------------------

_run_id: contextvars.ContextVar[str] = contextvars.ContextVar("run_id", default="")


def get_run_id() -> str:
    """Get the current run ID, or generate one if not set."""
    rid = _run_id.get()
    if not rid:
        rid = str(uuid.uuid4())
        _run_id.set(rid)
    return rid


def set_run_id(rid: str) -> None:
    _run_id.set(rid)


# ---------------------------------------------------------------------------
# Structured JSON logger
# ---------------------------------------------------------------------------

_logger = logging.getLogger("fgvis")


def setup_logging(level: str | None = None) -> None:
    """Configure structured JSON logging to stderr (idempotent)."""
    if _logger.handlers:
        if level:
            _logger.setLevel(level.upper())
        return
    _logger.setLevel((level or os.getenv("FGVIS_LOG_LEVEL", "INFO")).upper())

    handler = _StderrHandler()
    handler.setFormatter(_StructuredFormatter())
    _logger.addHandler(handler)
    _logger.propagate = False


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


class _StructuredFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "timestamp": self.formatTime(record, "%Y-%m-%dT%H:%M:%S.000Z"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if hasattr(record, "extra_data"):
            entry.update(record.extra_data)
        rid = _run_id.get()
        if rid:
            entry["run_id"] = rid
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


def get_logger(name: str) -> logging.Logger:
    """Child logger under the 'fgvis' namespace."""
    return _logger.getChild(name)


def audit_log(event_type: str, level: int = logging.INFO, **kwargs: Any) -> None:
    """Emit a structured audit log entry."""
    setup_logging()
    if not _logger.isEnabledFor(level):
        return
    record = _logger.makeRecord(
        name="fgvis.audit",
        level=level,
        fn="",
        lno=0,
        msg=f"{event_type}",
        args=(),
        exc_info=None,
    )
    record.extra_data = {"event_type": event_type, **kwargs}
    _logger.handle(record)


# ---------------------------------------------------------------------------
# Command wrapper — run ID + timing + audit logging
# ---------------------------------------------------------------------------

def audited_command(name: str) -> Callable[[Callable[..., R]], Callable[..., R]]:
    """
    Decorate a command handler with:
      - a fresh run ID per invocation
      - structured audit events (command.start, command.end, command.error)
      - duration tracking (ms)
    """

    def decorator(fn: Callable[..., R]) -> Callable[..., R]:
        @functools.wraps(fn)
        def _wrapped(*args: Any, **kwargs: Any) -> R:
            set_run_id(str(uuid.uuid4()))
            audit_log("command.start", command=name)
            start = time.monotonic()
            try:
                result = fn(*args, **kwargs)
            except Exception as exc:
                duration_ms = int((time.monotonic() - start) * 1000)
                audit_log(
                    "command.error",
                    level=logging.ERROR,
                    command=name,
                    duration_ms=duration_ms,
                    error=str(exc),
                    error_type=type(exc).__name__,
                )
                raise
            duration_ms = int((time.monotonic() - start) * 1000)
            audit_log("command.end", command=name, duration_ms=duration_ms)
            return result

        return _wrapped

    return decorator


# ---------------------------------------------------------------------------
# Parallel map
# ---------------------------------------------------------------------------

def default_jobs() -> int:
    return max(1, int(os.getenv("FGVIS_JOBS", "1")))


def run_parallel(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    """
    Map fn over items, preserving input order. Each task runs in a copy of the
    caller's context so the run ID follows the work into the pool.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(contextvars.copy_context().run, fn, item) for item in items
        ]
        return [f.result() for f in futures]
