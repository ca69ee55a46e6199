"""
FlowAug - File Utilities
Atomic writes and CSV helpers for experiment artifacts
"""

import csv
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def ensure_dir(path: PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """
    Write `payload` to `path` via a temporary file in the same directory and a rename

    Args:
        path: destination file
        payload: file content

    Returns:
        Destination path
    """
    path = Path(path)
    ensure_dir(path.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except Exception as e:
        logger.error(f"Atomic write to {path} failed: {str(e)}")
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(path: PathLike, rows: Iterable[Dict[str, object]], fieldnames: Sequence[str]) -> Path:
    """Write dict rows as CSV atomically; floats keep full precision."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    count = 0
    for row in rows:
        writer.writerow({k: _cell(row.get(k, "")) for k in fieldnames})
        count += 1
    logger.debug(f"Writing {count} rows to {path}")
    return atomic_write_text(path, buffer.getvalue())


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def _cell(value: object) -> object:
    if isinstance(value, float):
        return repr(float(value))
    return value
