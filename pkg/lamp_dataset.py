"""Loading, validation and splitting of LaMP-style personalization records."""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from data_processing import iter_jsonl_lines, write_jsonl_atomic
from task_config import TaskKind, validate_label

logger = logging.getLogger(__name__)

DEFAULT_TEST_FRACTION = 0.2

_REQUIRED_FIELDS = ("instance_id", "user_id", "kind", "query", "gold", "profile")
_ENTRY_REQUIRED_FIELDS = ("entry_id", "text")


class DatasetError(Exception):
    """Base class for dataset ingestion and splitting failures."""


class DatasetIOError(DatasetError, OSError):
    pass


class SchemaError(DatasetError, ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class LabelError(DatasetError, ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class InsufficientUsers(DatasetError, ValueError):
    pass


class EmptyUserHistory(DatasetError, ValueError):
    pass


class InvalidSplitFraction(DatasetError, ValueError):
    pass


@dataclass(frozen=True)
class ProfileEntry:
    entry_id: str
    text: str
    label: Optional[str] = None
    timestamp: Optional[int] = None

    def to_dict(self) -> dict:
        payload = {"entry_id": self.entry_id, "text": self.text}
        if self.label is not None:
            payload["label"] = self.label
        if self.timestamp is not None:
            payload["timestamp"] = self.timestamp
        return payload


@dataclass(frozen=True)
class TaskInstance:
    instance_id: str
    user_id: str
    kind: TaskKind
    query: str
    gold: str
    profile: Tuple[ProfileEntry, ...] = ()
    timestamp: Optional[int] = None

    def to_dict(self) -> dict:
        payload = {
            "instance_id": self.instance_id,
            "user_id": self.user_id,
            "kind": self.kind.value,
            "query": self.query,
            "gold": self.gold,
            "profile": [entry.to_dict() for entry in self.profile],
        }
        if self.timestamp is not None:
            payload["timestamp"] = self.timestamp
        return payload


class SplitMode(str, Enum):
    USER = "UserSplit"
    TIME = "TimeSplit"


@dataclass(frozen=True)
class DatasetSplit:
    mode: SplitMode
    train: Tuple[TaskInstance, ...]
    test: Tuple[TaskInstance, ...]

    def side(self, name: str) -> Tuple[TaskInstance, ...]:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        if name == "all":
            return self.train + self.test
        raise ValueError(f"unknown split side: {name!r}")

    def summary(self) -> Dict[str, int]:
        return {
            "train_users": len({inst.user_id for inst in self.train}),
            "test_users": len({inst.user_id for inst in self.test}),
            "train_instances": len(self.train),
            "test_instances": len(self.test),
        }


def _require_text(value, line_no: int, name: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(line_no, f"field {name!r} must be a string")
    return value


def _optional_int(value, line_no: int, name: str) -> Optional[int]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(line_no, f"field {name!r} must be an integer")
    return value


def _parse_entry(raw, kind: TaskKind, line_no: int) -> ProfileEntry:
    if not isinstance(raw, dict):
        raise SchemaError(line_no, "profile entries must be objects")
    for name in _ENTRY_REQUIRED_FIELDS:
        if name not in raw:
            raise SchemaError(line_no, f"profile entry missing {name!r}")
    text = _require_text(raw["text"], line_no, "text")
    if not text.strip():
        raise SchemaError(line_no, "profile entry text is empty")
    label = raw.get("label")
    if label is not None:
        label = _require_text(label, line_no, "label")
        if kind.label_space is not None and not validate_label(kind, label):
            raise LabelError(line_no, f"profile label {label!r} outside the {kind.value} label space")
    return ProfileEntry(
        entry_id=_require_text(raw["entry_id"], line_no, "entry_id"),
        text=text,
        label=label,
        timestamp=_optional_int(raw.get("timestamp"), line_no, "timestamp"),
    )


def _parse_record(record, kind: TaskKind, line_no: int) -> TaskInstance:
    if not isinstance(record, dict):
        raise SchemaError(line_no, "record must be a JSON object")
    for name in _REQUIRED_FIELDS:
        if name not in record:
            raise SchemaError(line_no, f"missing required field {name!r}")

    try:
        record_kind = TaskKind.parse(record["kind"])
    except ValueError as exc:
        raise SchemaError(line_no, str(exc)) from exc
    if record_kind is not kind:
        raise SchemaError(line_no, f"record kind {record_kind.value} does not match {kind.value}")

    gold = _require_text(record["gold"], line_no, "gold")
    if not validate_label(kind, gold):
        raise LabelError(line_no, f"gold {gold!r} outside the {kind.value} label space")

    raw_profile = record["profile"]
    if not isinstance(raw_profile, list):
        raise SchemaError(line_no, "field 'profile' must be a list")
    entries = tuple(_parse_entry(raw, kind, line_no) for raw in raw_profile)
    seen = set()
    for entry in entries:
        if entry.entry_id in seen:
            raise SchemaError(line_no, f"duplicate profile entry_id {entry.entry_id!r}")
        seen.add(entry.entry_id)

    return TaskInstance(
        instance_id=_require_text(record["instance_id"], line_no, "instance_id"),
        user_id=_require_text(record["user_id"], line_no, "user_id"),
        kind=kind,
        query=_require_text(record["query"], line_no, "query"),
        gold=gold,
        profile=entries,
        timestamp=_optional_int(record.get("timestamp"), line_no, "timestamp"),
    )


def load_dataset(path: str, kind: TaskKind) -> List[TaskInstance]:
    kind = TaskKind.parse(kind)
    instances: List[TaskInstance] = []
    try:
        for line_no, text in iter_jsonl_lines(path):
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, f"invalid JSON: {exc.msg}") from exc
            instances.append(_parse_record(record, kind, line_no))
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetIOError(f"cannot read dataset {path}: {exc}") from exc
    logger.info("loaded %d %s instances from %s", len(instances), kind.value, path)
    return instances


def dump_dataset(instances: Iterable[TaskInstance], path: str) -> int:
    try:
        return write_jsonl_atomic((inst.to_dict() for inst in instances), path)
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset {path}: {exc}") from exc


def _group_by_user(instances: Sequence[TaskInstance]) -> "OrderedDict[str, List[int]]":
    groups: "OrderedDict[str, List[int]]" = OrderedDict()
    for position, inst in enumerate(instances):
        groups.setdefault(inst.user_id, []).append(position)
    return groups


def split_users(
    instances: Sequence[TaskInstance],
    n_train_users: int,
    n_test_users: int,
    seed: int,
) -> DatasetSplit:
    """Partition users into disjoint train/test sets of exactly the requested sizes."""

    if n_train_users < 0 or n_test_users < 0:
        raise InsufficientUsers("user counts must be non-negative")
    users = sorted({inst.user_id for inst in instances})
    needed = n_train_users + n_test_users
    if len(users) < needed:
        raise InsufficientUsers(f"{len(users)} distinct users available, {needed} requested")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(users))
    train_users = {users[i] for i in order[:n_train_users]}
    test_users = {users[i] for i in order[n_train_users:needed]}

    train = tuple(inst for inst in instances if inst.user_id in train_users)
    test = tuple(inst for inst in instances if inst.user_id in test_users)
    logger.debug("user split seed=%s -> %d/%d users", seed, len(train_users), len(test_users))
    return DatasetSplit(mode=SplitMode.USER, train=train, test=test)


def split_time(instances: Sequence[TaskInstance], test_fraction: float = DEFAULT_TEST_FRACTION) -> DatasetSplit:
    """Per-user chronological split: oldest instances train, newest instances test."""

    if not (0.0 < test_fraction < 1.0):
        raise InvalidSplitFraction(f"test_fraction must lie strictly between 0 and 1, got {test_fraction}")

    test_positions = set()
    for user_id, positions in _group_by_user(instances).items():
        n = len(positions)
        if n < 2:
            raise EmptyUserHistory(f"user {user_id!r} has {n} instance(s); at least 2 are required")
        if all(instances[p].timestamp is not None for p in positions):
            ordered = sorted(positions, key=lambda p: (instances[p].timestamp, p))
        else:
            ordered = list(positions)
        n_test = math.ceil(round(n * test_fraction, 9))
        n_test = min(max(n_test, 1), n - 1)
        test_positions.update(ordered[n - n_test:])

    train = tuple(inst for pos, inst in enumerate(instances) if pos not in test_positions)
    test = tuple(inst for pos, inst in enumerate(instances) if pos in test_positions)
    return DatasetSplit(mode=SplitMode.TIME, train=train, test=test)
