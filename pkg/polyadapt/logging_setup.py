"""Structured logging utilities."""
from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

import orjson


class OrjsonFormatter(logging.Formatter):
    """Formatter that outputs JSON using orjson.

    Structured values passed as ``extra={"fields": {...}}`` are merged into
    the record.
    """

    def format(self, record: logging.LogRecord) -> str:  # noqa: D401
        data = {
            "name": record.name,
            "level": record.levelname,
            "message": record.getMessage(),
            "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S%z"),
        }
        fields = getattr(record, "fields", None)
        if isinstance(fields, dict):
            data.update(fields)
        if record.exc_info:
            data["exc_info"] = self.formatException(record.exc_info)
        return orjson.dumps(data, default=str, option=orjson.OPT_SERIALIZE_NUMPY).decode()


def setup_logging(log_dir: str | Path = "logs", level: str = "INFO") -> Path:
    """Configure the root logger with a rotating JSON file."""
    path = Path(log_dir)
    path.mkdir(parents=True, exist_ok=True)

    handler = RotatingFileHandler(path / "polyadapt.log", maxBytes=1_000_000, backupCount=3, encoding="utf-8")
    handler.setFormatter(OrjsonFormatter())

    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), handlers=[handler], force=True)
    return path / "polyadapt.log"
