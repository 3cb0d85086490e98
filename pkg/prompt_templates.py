"""Prompt rendering for base generation, reflective rewriting, teacher trajectories and baselines."""

from __future__ import annotations

import functools
import logging
import math
import os
import re
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Mapping, Optional, Sequence, Tuple

from lamp_dataset import ProfileEntry, TaskInstance
from profile_retrieval import RankedContext
from task_config import MOVIE_TAGS, TASK_PROFILES, UNLABELED_PROFILE_LINE, TaskKind

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")
DEFAULT_TEACHER_VERSION = "v1"
DEFAULT_MAX_SEQUENCE_TOKENS = 2048
TOKENS_PER_WORD = 1.3

FORMAT_INSTRUCTION = (
    "The output should follow this structured format: "
    "<think>...</think>, and <personalized>...</personalized>."
)

ALLOWED_PLACEHOLDERS: FrozenSet[str] = frozenset(
    {"QUERY", "MOVIE", "REVIEW", "ABSTRACT", "TWEET", "BASE_RESPONSE", "PROFILE_BLOCK", "TAG_LIST", "GOLD"}
)
_PLACEHOLDER_RE = re.compile(r"\{([A-Z_]+)\}")


class PromptError(Exception):
    """Base class for prompt assembly failures."""


class PlaceholderMissing(PromptError, ValueError):
    pass


class ContextEmpty(PromptError, ValueError):
    pass


class TokenBudgetExceeded(PromptError, ValueError):
    pass


class ModeContextMismatch(PromptError, ValueError):
    pass


class PromptPreconditionError(PromptError, ValueError):
    pass


class TemplateError(PromptError, OSError):
    pass


class PromptKind(str, Enum):
    BASE = "Base"
    REFLECTION = "Reflection"
    TEACHER = "Teacher"
    BASELINE_ICL = "BaselineICL"
    BASELINE_RAG = "BaselineRAG"
    BASELINE_ZERO_SHOT = "BaselineZeroShot"


class BaselineMode(str, Enum):
    ZERO_SHOT = "ZeroShot"
    ICL = "ICL"
    RAG = "RAG"


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    task: TaskKind
    body: str

    def __post_init__(self) -> None:
        unknown = self.placeholders - ALLOWED_PLACEHOLDERS
        if unknown:
            raise PlaceholderMissing(f"unknown placeholder(s) {sorted(unknown)} in {self.kind.value} template")

    @property
    def placeholders(self) -> FrozenSet[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))

    def render(self, values: Mapping[str, str]) -> str:
        missing = self.placeholders - set(values)
        if missing:
            raise PlaceholderMissing(
                f"{self.kind.value} template for {self.task.value} needs {sorted(missing)}"
            )
        return _PLACEHOLDER_RE.sub(lambda match: values[match.group(1)], self.body)


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    shot_count: int
    token_estimate: int
    kind: PromptKind
    task: TaskKind


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text.split()) * TOKENS_PER_WORD)


class TemplateStore:
    """Loads template files from ``root`` once and hands out validated ``PromptTemplate`` objects."""

    def __init__(self, root: str = DEFAULT_TEMPLATE_DIR, teacher_version: str = DEFAULT_TEACHER_VERSION):
        self.root = root
        self.teacher_version = teacher_version
        self._cache: Dict[Tuple[PromptKind, TaskKind], PromptTemplate] = {}
        self._lock = threading.Lock()

    def _relative_path(self, kind: PromptKind, task: TaskKind) -> str:
        name = f"{task.template_name}.txt"
        if kind is PromptKind.BASE or kind is PromptKind.BASELINE_ZERO_SHOT:
            return os.path.join("base", name)
        if kind is PromptKind.REFLECTION:
            return os.path.join("reflection", name)
        if kind is PromptKind.TEACHER:
            return os.path.join(f"teacher_{self.teacher_version}", name)
        return os.path.join("baseline", "header.txt")

    def template(self, kind: PromptKind, task: TaskKind) -> PromptTemplate:
        key = (kind, task)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached

        path = os.path.join(self.root, self._relative_path(kind, task))
        try:
            with open(path, "r", encoding="utf-8") as handle:
                body = handle.read().rstrip("\n")
        except OSError as exc:
            raise TemplateError(f"cannot read template {path}: {exc}") from exc
        template = PromptTemplate(kind=kind, task=task, body=body)
        _check_template(template, path)

        with self._lock:
            self._cache[key] = template
        logger.debug("loaded template %s", path)
        return template


def _check_template(template: PromptTemplate, path: str) -> None:
    if template.kind in (PromptKind.REFLECTION, PromptKind.TEACHER):
        count = template.body.count(FORMAT_INSTRUCTION)
        if count != 1:
            raise TemplateError(f"{path} must contain the output-format sentence exactly once, found {count}")
    if template.kind is PromptKind.BASE and "PROFILE_BLOCK" in template.placeholders:
        raise TemplateError(f"{path}: base templates cannot embed profile content")


@functools.lru_cache(maxsize=None)
def default_store() -> TemplateStore:
    return TemplateStore()


def format_profile_line(task: TaskKind, entry: ProfileEntry) -> str:
    if entry.label is None:
        return UNLABELED_PROFILE_LINE.format(text=entry.text)
    return TASK_PROFILES[task]["profile_line"].format(text=entry.text, label=entry.label)


def format_profile_block(task: TaskKind, entries: Sequence[ProfileEntry]) -> str:
    return "\n".join(format_profile_line(task, entry) for entry in entries)


def _task_values(task: TaskKind, query: str) -> Dict[str, str]:
    values = {"QUERY": query, TASK_PROFILES[task]["input_placeholder"]: query}
    if task is TaskKind.MOVIE_TAGGING:
        values["TAG_LIST"] = ", ".join(MOVIE_TAGS)
    return values


def _finish(text: str, shots: int, kind: PromptKind, task: TaskKind, max_tokens: int) -> RenderedPrompt:
    estimate = estimate_tokens(text)
    if estimate > max_tokens:
        raise TokenBudgetExceeded(f"{kind.value} prompt needs ~{estimate} tokens, budget is {max_tokens}")
    return RenderedPrompt(text=text, shot_count=shots, token_estimate=estimate, kind=kind, task=task)


def _fit_entries(
    build,
    entries: Sequence[ProfileEntry],
    kind: PromptKind,
    task: TaskKind,
    max_tokens: int,
) -> RenderedPrompt:
    # entries arrive best-first, so the tail is the lowest-scored
    kept = list(entries)
    while True:
        text = build(kept)
        estimate = estimate_tokens(text)
        if estimate <= max_tokens:
            if len(kept) < len(entries):
                logger.debug("dropped %d profile entries to fit %d tokens", len(entries) - len(kept), max_tokens)
            return RenderedPrompt(text=text, shot_count=len(kept), token_estimate=estimate, kind=kind, task=task)
        if len(kept) == 1:
            raise TokenBudgetExceeded(
                f"{kind.value} prompt needs ~{estimate} tokens with a single profile entry, budget is {max_tokens}"
            )
        kept.pop()


def _store(store: Optional[TemplateStore]) -> TemplateStore:
    return store if store is not None else default_store()


def render_base(
    task: TaskKind,
    instance: TaskInstance,
    *,
    store: Optional[TemplateStore] = None,
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS,
) -> RenderedPrompt:
    if instance.kind is not task:
        raise PromptPreconditionError(f"instance {instance.instance_id} is {instance.kind.value}, not {task.value}")
    template = _store(store).template(PromptKind.BASE, task)
    text = template.render(_task_values(task, instance.query))
    return _finish(text, 0, PromptKind.BASE, task, max_tokens)


def render_reflection(
    task: TaskKind,
    query: str,
    base_response: str,
    context: RankedContext,
    *,
    store: Optional[TemplateStore] = None,
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS,
) -> RenderedPrompt:
    """``query`` is the full user query as shown to the base model."""

    if context is None or not len(context):
        raise ContextEmpty("reflection needs at least one profile entry")
    if not base_response or not base_response.strip():
        raise PromptPreconditionError("base_response must be non-empty")
    if not query or not query.strip():
        raise PromptPreconditionError("query must be non-empty")
    template = _store(store).template(PromptKind.REFLECTION, task)

    def build(entries):
        values = {"QUERY": query, "BASE_RESPONSE": base_response, "PROFILE_BLOCK": format_profile_block(task, entries)}
        return template.render(values)

    return _fit_entries(build, context.profile_entries, PromptKind.REFLECTION, task, max_tokens)


def render_teacher(
    task: TaskKind,
    query: str,
    base_response: str,
    gold: str,
    p_star: ProfileEntry,
    *,
    store: Optional[TemplateStore] = None,
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS,
) -> RenderedPrompt:
    for name, value in (("query", query), ("base_response", base_response), ("gold", gold)):
        if not value or not value.strip():
            raise PromptPreconditionError(f"{name} must be non-empty")
    if p_star is None:
        raise ContextEmpty("teacher prompt needs one profile example")
    template = _store(store).template(PromptKind.TEACHER, task)
    text = template.render(
        {
            "QUERY": query,
            "BASE_RESPONSE": base_response,
            "GOLD": gold,
            "PROFILE_BLOCK": format_profile_line(task, p_star),
        }
    )
    return _finish(text, 1, PromptKind.TEACHER, task, max_tokens)


def render_baseline(
    mode: BaselineMode,
    task: TaskKind,
    instance: TaskInstance,
    context: Optional[RankedContext] = None,
    *,
    rag_k: Optional[int] = None,
    store: Optional[TemplateStore] = None,
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS,
) -> RenderedPrompt:
    mode = BaselineMode(mode)
    if mode is BaselineMode.ZERO_SHOT:
        if context is not None:
            raise ModeContextMismatch("ZeroShot prompts take no profile context")
        base = render_base(task, instance, store=store, max_tokens=max_tokens)
        return RenderedPrompt(
            text=base.text,
            shot_count=0,
            token_estimate=base.token_estimate,
            kind=PromptKind.BASELINE_ZERO_SHOT,
            task=task,
        )

    if context is None or not len(context):
        raise ModeContextMismatch(f"{mode.value} prompts need a non-empty profile context")
    if mode is BaselineMode.RAG and rag_k is not None and context.k != rag_k:
        raise ModeContextMismatch(f"RAG expects a top-{rag_k} context, got k={context.k}")

    kind = PromptKind.BASELINE_RAG if mode is BaselineMode.RAG else PromptKind.BASELINE_ICL
    templates = _store(store)
    header = templates.template(kind, task)
    base_text = render_base(task, instance, store=templates, max_tokens=max_tokens).text

    def build(entries):
        return header.render({"PROFILE_BLOCK": format_profile_block(task, entries)}) + "\n\n" + base_text

    return _fit_entries(build, context.profile_entries, kind, task, max_tokens)
