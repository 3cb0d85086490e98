"""Parsing of ``<think>/<personalized>`` rewrites and of task-level answers."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

from task_config import MOVIE_TAGS, MetricProfile, TaskKind, normalize_tag, validate_label

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
PERSONALIZED_OPEN = "<personalized>"
PERSONALIZED_CLOSE = "</personalized>"
_ALL_TAGS = (THINK_OPEN, THINK_CLOSE, PERSONALIZED_OPEN, PERSONALIZED_CLOSE)

# an integer that is neither part of a word nor of a decimal number
_STANDALONE_INT = re.compile(r"(?<![\w.])(\d+)(?!\w)(?!\.\d)")


class StructuredOutputError(ValueError):
    """The rewrite does not follow the two-block output format."""


class MissingThink(StructuredOutputError):
    pass


class MissingPersonalized(StructuredOutputError):
    pass


class MultipleBlocks(StructuredOutputError):
    pass


class OrderViolation(StructuredOutputError):
    pass


class EmptyPersonalized(StructuredOutputError):
    pass


class LabelParseError(ValueError):
    """The personalized answer is not a legal label for the task."""


class UnknownTag(LabelParseError):
    pass


class NoRatingFound(LabelParseError):
    pass


@dataclass(frozen=True)
class StructuredOutput:
    think: str
    personalized: str
    raw: str
    salvaged: bool = False


@dataclass(frozen=True)
class Tag:
    value: str

    def render(self) -> str:
        return self.value


@dataclass(frozen=True)
class Rating:
    value: int

    def __post_init__(self) -> None:
        if not 1 <= self.value <= 5:
            raise ValueError(f"rating {self.value} outside 1..5")

    def render(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class FreeText:
    text: str

    def render(self) -> str:
        return self.text


ParsedLabel = Union[Tag, Rating, FreeText]


def format_structured(think: str, personalized: str) -> str:
    return f"{THINK_OPEN}{think}{THINK_CLOSE}\n{PERSONALIZED_OPEN}{personalized}{PERSONALIZED_CLOSE}"


def _as_text(text) -> str:
    if isinstance(text, (bytes, bytearray)):
        return bytes(text).decode("utf-8", errors="replace")
    if text is None:
        return ""
    return str(text)


def _salvage(raw: str, kind: Optional[TaskKind]) -> Optional[StructuredOutput]:
    if kind is None or kind.metric_profile is MetricProfile.GENERATION:
        return None
    if any(tag in raw for tag in _ALL_TAGS):
        return None
    candidate = raw.strip()
    if kind.metric_profile is MetricProfile.CLASSIFICATION:
        candidate = normalize_tag(candidate)
    if not validate_label(kind, candidate):
        return None
    return StructuredOutput(think="", personalized=candidate, raw=raw, salvaged=True)


def parse_structured(text, *, lenient: bool = False, kind: Optional[TaskKind] = None) -> StructuredOutput:
    """Extract the unique think/personalized pair; text outside the blocks is ignored.

    With ``lenient`` and a classification or regression ``kind``, an output that carries no
    tags at all but is itself a legal label is accepted with an empty think block.
    """

    raw = _as_text(text)
    for tag in _ALL_TAGS:
        if raw.count(tag) > 1:
            raise MultipleBlocks(f"{tag} appears {raw.count(tag)} times")

    think_open = raw.find(THINK_OPEN)
    think_close = raw.find(THINK_CLOSE)
    pers_open = raw.find(PERSONALIZED_OPEN)
    pers_close = raw.find(PERSONALIZED_CLOSE)

    if think_open < 0 or think_close < 0 or think_close < think_open:
        if lenient:
            salvaged = _salvage(raw, kind)
            if salvaged is not None:
                return salvaged
        raise MissingThink("no well-formed <think> block")
    if pers_open < 0 or pers_close < 0 or pers_close < pers_open:
        raise MissingPersonalized("no well-formed <personalized> block")
    if think_close > pers_open:
        raise OrderViolation("<think> block must close before <personalized> opens")

    think = raw[think_open + len(THINK_OPEN):think_close].strip()
    personalized = raw[pers_open + len(PERSONALIZED_OPEN):pers_close].strip()
    if not personalized:
        raise EmptyPersonalized("<personalized> block is empty")
    return StructuredOutput(think=think, personalized=personalized, raw=raw)


def parse_label(kind: TaskKind, personalized: str) -> ParsedLabel:
    profile = kind.metric_profile
    if profile is MetricProfile.GENERATION:
        if not personalized or not personalized.strip():
            raise LabelParseError("empty answer")
        return FreeText(personalized)

    if profile is MetricProfile.CLASSIFICATION:
        tag = normalize_tag(personalized)
        if tag not in MOVIE_TAGS:
            raise UnknownTag(f"{personalized!r} is not one of the {len(MOVIE_TAGS)} tags")
        return Tag(tag)

    for match in _STANDALONE_INT.finditer(personalized or ""):
        value = int(match.group(1))
        if 1 <= value <= 5:
            return Rating(value)
    raise NoRatingFound(f"no rating between 1 and 5 in {personalized!r}")
