"""JSON / JSONL helpers shared by the dataset, trajectory, rollout and report writers."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from typing import Any, Iterable, Iterator, Tuple

import pandas as pd

logger = logging.getLogger(__name__)

# read once; os.umask can only be queried by setting it
_UMASK = os.umask(0)
os.umask(_UMASK)


def iter_jsonl_lines(path: str) -> Iterator[Tuple[int, str]]:
    """Yield ``(line_no, text)`` for every non-blank line; line numbers start at 1."""

    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            stripped = line.strip()
            if stripped:
                yield line_no, stripped


def iter_jsonl(path: str) -> Iterator[Tuple[int, Any]]:
    for line_no, text in iter_jsonl_lines(path):
        yield line_no, json.loads(text)


def read_jsonl(path: str) -> list:
    return [record for _, record in iter_jsonl(path)]


def _atomic_write(path: str, payload: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        # mkstemp creates 0600; exports get the mode a plain open() would give them
        os.chmod(tmp_path, 0o666 & ~_UMASK)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_jsonl_atomic(records: Iterable[Any], path: str) -> int:
    """Write one JSON document per line and atomically replace ``path``."""

    lines = [json.dumps(record, ensure_ascii=False, sort_keys=False) for record in records]
    payload = "".join(line + "\n" for line in lines)
    _atomic_write(path, payload)
    logger.debug("wrote %d records to %s", len(lines), path)
    return len(lines)


def write_json_atomic(document: Any, path: str) -> None:
    _atomic_write(path, json.dumps(document, ensure_ascii=False, indent=2) + "\n")


def write_text_atomic(text: str, path: str) -> None:
    _atomic_write(path, text)


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def records_to_frame(records: Iterable[dict]) -> pd.DataFrame:
    """Tabulate exported records (results, rollouts, trajectories) for inspection."""

    return pd.DataFrame.from_records(list(records))
