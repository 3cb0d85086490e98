"""Construction of the filtered SFT corpus of structured rewriting trajectories.

For every training instance the generic answer is produced by the base model, the single most
relevant profile example is retrieved with ``q + A_base``, and the teacher model is asked to
explain how that example turns the generic answer into the user's real one. Only outputs that
parse, agree with the gold answer and keep the reasoning short are kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

from data_processing import iter_jsonl, write_jsonl_atomic
from lamp_dataset import ProfileEntry, TaskInstance
from llm_utils import (
    CompletionRequest,
    MalformedResponse,
    ProviderError,
    ProviderSet,
    Role,
    SamplingConfig,
    first_text,
    map_bounded,
)
from metrics import rougeL
from profile_retrieval import EmptyProfile, RetrievalBackend, form_query, retrieve_topk
from prompt_templates import (
    DEFAULT_MAX_SEQUENCE_TOKENS,
    PromptError,
    RenderedPrompt,
    TemplateStore,
    TokenBudgetExceeded,
    render_base,
    render_teacher,
)
from structured_output import LabelParseError, StructuredOutputError, parse_label, parse_structured
from task_config import MetricProfile, TaskKind

logger = logging.getLogger(__name__)

DEFAULT_BREVITY_CAP_WORDS = 350
DEFAULT_ROUGE_L_THRESHOLD = 0.9

SFT_FIELDS = (
    "instance_id",
    "query",
    "base_response",
    "p_star_text",
    "p_star_label",
    "think",
    "personalized",
    "gold",
    "task",
)


class RejectionReason(str, Enum):
    PARSE_FAILURE = "ParseFailure"
    CONSISTENCY_FAIL = "ConsistencyFail"
    BREVITY_FAIL = "BrevityFail"
    EMPTY_PROFILE = "EmptyProfile"
    TOKEN_BUDGET = "TokenBudget"
    PROVIDER_FAILURE = "ProviderFailure"


class ConsistencyMode(str, Enum):
    EXACT_MATCH = "ExactMatch"
    ROUGE_L_AT_LEAST = "RougeLAtLeast"


@dataclass(frozen=True)
class ConsistencyRule:
    mode: ConsistencyMode = ConsistencyMode.EXACT_MATCH
    threshold: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode is ConsistencyMode.ROUGE_L_AT_LEAST:
            if self.threshold is None or not 0 < self.threshold <= 1:
                raise ValueError(f"RougeLAtLeast threshold must lie in (0, 1], got {self.threshold}")


def _default_rules() -> Dict[TaskKind, ConsistencyRule]:
    rules = {}
    for kind in TaskKind:
        if kind.metric_profile is MetricProfile.GENERATION:
            rules[kind] = ConsistencyRule(ConsistencyMode.ROUGE_L_AT_LEAST, DEFAULT_ROUGE_L_THRESHOLD)
        else:
            rules[kind] = ConsistencyRule(ConsistencyMode.EXACT_MATCH)
    return rules


@dataclass(frozen=True)
class FilterPolicy:
    consistency: Dict[TaskKind, ConsistencyRule] = field(default_factory=_default_rules)
    brevity_cap_words: int = DEFAULT_BREVITY_CAP_WORDS

    def rule_for(self, kind: TaskKind) -> ConsistencyRule:
        return self.consistency.get(kind) or _default_rules()[kind]


@dataclass(frozen=True)
class RewriteTrajectory:
    instance_id: str
    task: TaskKind
    query: str
    base_response: str
    p_star: ProfileEntry
    think: str
    personalized: str
    gold: str
    filter_flags: FrozenSet[str] = frozenset()

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "query": self.query,
            "base_response": self.base_response,
            "p_star_text": self.p_star.text,
            "p_star_label": self.p_star.label,
            "think": self.think,
            "personalized": self.personalized,
            "gold": self.gold,
            "task": self.task.value,
        }

    @classmethod
    def from_record(cls, record: dict) -> "RewriteTrajectory":
        missing = [name for name in SFT_FIELDS if name not in record]
        if missing:
            raise ValueError(f"SFT record {record.get('instance_id')!r} is missing {missing}")
        return cls(
            instance_id=record["instance_id"],
            task=TaskKind.parse(record["task"]),
            query=record["query"],
            base_response=record["base_response"],
            p_star=ProfileEntry(entry_id="p_star", text=record["p_star_text"], label=record.get("p_star_label")),
            think=record["think"],
            personalized=record["personalized"],
            gold=record["gold"],
        )


@dataclass(frozen=True)
class Rejection:
    instance_id: str
    reason: RejectionReason
    detail: str = ""

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "reason": self.reason.value, "detail": self.detail}


@dataclass(frozen=True)
class TrajectorySettings:
    store: Optional[TemplateStore] = None
    retrieval: Optional[RetrievalBackend] = None
    base_sampling: SamplingConfig = field(default_factory=SamplingConfig)
    teacher_sampling: SamplingConfig = field(default_factory=SamplingConfig)
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS


@dataclass
class SftRunReport:
    accepted: List[RewriteTrajectory]
    rejections: List[Rejection]
    attempted: int

    @property
    def acceptance_rate(self) -> float:
        return len(self.accepted) / self.attempted if self.attempted else 0.0

    def rejection_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for rejection in self.rejections:
            counts[rejection.reason.value] = counts.get(rejection.reason.value, 0) + 1
        return counts

    def to_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "accepted": len(self.accepted),
            "acceptance_rate": self.acceptance_rate,
            "rejections": self.rejection_counts(),
            "rejected_instances": [rejection.to_dict() for rejection in self.rejections],
        }


def base_generation(
    instance: TaskInstance,
    providers: ProviderSet,
    *,
    sampling: Optional[SamplingConfig] = None,
    store: Optional[TemplateStore] = None,
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS,
) -> Tuple[RenderedPrompt, str]:
    """Render the profile-free base prompt and sample one generic answer from the base model."""

    prompt = render_base(instance.kind, instance, store=store, max_tokens=max_tokens)
    sampling = sampling or SamplingConfig()
    if sampling.n_samples != 1:
        sampling = SamplingConfig(sampling.temperature, sampling.top_p, 1, sampling.max_new_tokens)
    result = providers.complete(CompletionRequest(prompt=prompt.text, sampling=sampling, role_tag=Role.BASE))
    text = first_text(result).strip()
    if not text:
        raise MalformedResponse(f"base model returned an empty answer for {instance.instance_id}")
    return prompt, text


def generate_base(
    instance: TaskInstance,
    providers: ProviderSet,
    *,
    sampling: Optional[SamplingConfig] = None,
    store: Optional[TemplateStore] = None,
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS,
) -> str:
    return base_generation(instance, providers, sampling=sampling, store=store, max_tokens=max_tokens)[1]


def _consistent(kind: TaskKind, personalized: str, gold: str, rule: ConsistencyRule) -> bool:
    if rule.mode is ConsistencyMode.ROUGE_L_AT_LEAST:
        return rougeL(personalized, gold).f1 >= rule.threshold
    if kind.metric_profile is MetricProfile.GENERATION:
        return personalized.strip() == gold.strip()
    try:
        return parse_label(kind, personalized) == parse_label(kind, gold)
    except LabelParseError:
        return False


def apply_filters(
    kind: TaskKind,
    think: str,
    personalized: str,
    gold: str,
    policy: FilterPolicy,
) -> Optional[RejectionReason]:
    """First failing check, consistency before brevity, or ``None`` when the record is kept."""

    if not _consistent(kind, personalized, gold, policy.rule_for(kind)):
        return RejectionReason.CONSISTENCY_FAIL
    if len(think.split()) > policy.brevity_cap_words:
        return RejectionReason.BREVITY_FAIL
    return None


def build_trajectory(
    instance: TaskInstance,
    providers: ProviderSet,
    settings: TrajectorySettings,
    policy: FilterPolicy,
) -> Union[RewriteTrajectory, Rejection]:
    iid = instance.instance_id
    if not instance.profile:
        return Rejection(iid, RejectionReason.EMPTY_PROFILE, "user profile is empty")

    try:
        base_prompt, base_response = base_generation(
            instance, providers, sampling=settings.base_sampling, store=settings.store, max_tokens=settings.max_tokens
        )
    except TokenBudgetExceeded as exc:
        return Rejection(iid, RejectionReason.TOKEN_BUDGET, str(exc))
    except ProviderError as exc:
        return Rejection(iid, RejectionReason.PROVIDER_FAILURE, f"base: {exc}")

    try:
        ranked = retrieve_topk(instance.profile, form_query(instance.query, base_response), 1, settings.retrieval)
    except EmptyProfile as exc:
        return Rejection(iid, RejectionReason.EMPTY_PROFILE, str(exc))
    p_star = ranked.profile_entries[0]

    try:
        prompt = render_teacher(
            instance.kind,
            base_prompt.text,
            base_response,
            instance.gold,
            p_star,
            store=settings.store,
            max_tokens=settings.max_tokens,
        )
    except TokenBudgetExceeded as exc:
        return Rejection(iid, RejectionReason.TOKEN_BUDGET, str(exc))

    try:
        result = providers.complete(
            CompletionRequest(prompt=prompt.text, sampling=settings.teacher_sampling, role_tag=Role.TEACHER)
        )
    except ProviderError as exc:
        return Rejection(iid, RejectionReason.PROVIDER_FAILURE, f"teacher: {exc}")

    try:
        structured = parse_structured(first_text(result))
    except StructuredOutputError as exc:
        return Rejection(iid, RejectionReason.PARSE_FAILURE, f"{type(exc).__name__}: {exc}")

    reason = apply_filters(instance.kind, structured.think, structured.personalized, instance.gold, policy)
    if reason is not None:
        return Rejection(iid, reason)

    return RewriteTrajectory(
        instance_id=iid,
        task=instance.kind,
        query=base_prompt.text,
        base_response=base_response,
        p_star=p_star,
        think=structured.think,
        personalized=structured.personalized,
        gold=instance.gold,
        filter_flags=frozenset({"parsed", "consistent", "brief"}),
    )


def build_sft_corpus(
    instances: Sequence[TaskInstance],
    providers: ProviderSet,
    settings: TrajectorySettings,
    policy: FilterPolicy,
    max_in_flight: int = 8,
) -> SftRunReport:
    outcomes = map_bounded(lambda inst: build_trajectory(inst, providers, settings, policy), instances, max_in_flight)
    accepted: List[RewriteTrajectory] = []
    rejections: List[Rejection] = []
    for instance, outcome in zip(instances, outcomes):
        if isinstance(outcome, RewriteTrajectory):
            accepted.append(outcome)
        elif isinstance(outcome, Rejection):
            rejections.append(outcome)
        elif isinstance(outcome, PromptError):
            # template or placeholder problems are configuration errors, not rejections
            raise outcome
        else:
            rejections.append(Rejection(instance.instance_id, RejectionReason.PROVIDER_FAILURE, str(outcome)))
    report = SftRunReport(accepted=accepted, rejections=rejections, attempted=len(instances))
    logger.info(
        "SFT corpus: %d/%d accepted (%.1f%%), rejections %s",
        len(accepted),
        report.attempted,
        100.0 * report.acceptance_rate,
        report.rejection_counts(),
    )
    return report


def export_sft(trajectories: Sequence[RewriteTrajectory], path: str) -> int:
    return write_jsonl_atomic((trajectory.to_record() for trajectory in trajectories), path)


def load_sft(path: str) -> List[RewriteTrajectory]:
    return [RewriteTrajectory.from_record(record) for _, record in iter_jsonl(path)]
