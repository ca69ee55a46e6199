"""
FlowAug - Logging Setup
Console logging plus structured JSON records for each run directory
"""

import logging
from pathlib import Path
from typing import Optional

from pythonjsonlogger import jsonlogger

RUN_LOG_FILENAME = "run_log.jsonl"
DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"

_run_handler: Optional[logging.Handler] = None


def configure_logging(level: str = "INFO", log_format: str = DEFAULT_FORMAT, out_dir: Optional[str] = None) -> None:
    """
    Configure console logging and, when `out_dir` is given, a JSON-lines run log

    Args:
        level: root log level name
        log_format: console format string
        out_dir: run directory that receives run_log.jsonl
    """
    global _run_handler

    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=log_format)
    root = logging.getLogger("")
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))

    if _run_handler is not None:
        root.removeHandler(_run_handler)
        _run_handler.close()
        _run_handler = None

    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path / RUN_LOG_FILENAME, encoding="utf-8")
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
        root.addHandler(handler)
        _run_handler = handler


def close_run_log() -> None:
    global _run_handler
    if _run_handler is not None:
        logging.getLogger("").removeHandler(_run_handler)
        _run_handler.close()
        _run_handler = None
