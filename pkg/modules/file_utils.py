# modules/file_utils.py

"""
Atomic file output: write to a temp file in the target directory, fsync, then
os.replace, so an interrupted run never leaves a truncated file behind.
"""

import csv
import io
import json
import logging
import os
import tempfile
import traceback
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

LOG = logging.getLogger(__name__)


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except Exception as e:
        LOG.error(f"❌ Atomic write to {path} failed: {e}")
        LOG.error(traceback.format_exc())
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path: str, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Write a CSV with a header row; returns the number of data rows."""
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(header)
    count = 0
    for row in rows:
        writer.writerow(row)
        count += 1
    atomic_write_text(path, buffer.getvalue())
    LOG.info(f"✅ Wrote {count} rows to {path}")
    return count


def _complete_lines(text: str, path: str) -> str:
    """`text` up to its last newline; a torn trailing record is dropped."""
    if not text or text.endswith("\n"):
        return text
    cut = text.rfind("\n") + 1
    LOG.warning(f"⚠️ Dropping torn final line of {path}: {text[cut:][:80]!r}")
    return text[:cut]


def append_jsonl(path: str, record: Dict[str, Any]) -> None:
    """Append one record by rewriting the whole file through the atomic path."""
    existing = ""
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            existing = _complete_lines(f.read(), path)
    line = json.dumps(record, sort_keys=True, default=_json_default) + "\n"
    atomic_write_text(path, existing + line)


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        text = _complete_lines(f.read(), path)
    return [json.loads(line) for line in text.splitlines() if line.strip()]
