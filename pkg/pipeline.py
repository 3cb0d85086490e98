"""Three-step RPO inference, baseline modes and dataset-level evaluation.

RPO inference for one instance:

1. the base model answers the profile-free prompt (``A_base``);
2. profile entries are ranked against ``q + A_base`` and the top ``k`` kept;
3. the reflection model rewrites ``A_base`` given those entries.

If the reflection output cannot be parsed the base answer is returned and the result is flagged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data_processing import records_to_frame
from lamp_dataset import SplitMode, TaskInstance, load_dataset, split_time, split_users
from llm_utils import CompletionRequest, MalformedResponse, ProviderSet, Role, build_providers, first_text, map_bounded
from metrics import IMPUTED_RATING, MetricReport, compute_metric_report, rouge1, rougeL
from profile_retrieval import EmptyProfile, RankedContext, RetrievalBackend, fixed_context, form_query, retrieve_topk
from prompt_templates import (
    BaselineMode,
    TemplateStore,
    TokenBudgetExceeded,
    render_baseline,
    render_reflection,
)
from run_config import ConfigError, Mode, RunConfig, config_hash
from structured_output import (
    FreeText,
    LabelParseError,
    ParsedLabel,
    Rating,
    StructuredOutputError,
    parse_label,
    parse_structured,
)
from task_config import MetricProfile, TaskKind
from trajectory import base_generation

logger = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


class ResultFlag(str, Enum):
    FALLBACK_USED = "FallbackUsed"
    EMPTY_PROFILE = "EmptyProfile"
    DEGRADED_TO_ZERO_SHOT = "DegradedToZeroShot"
    LABEL_PARSE_FAILURE = "LabelParseFailure"
    INFERENCE_FAILURE = "InferenceFailure"


@dataclass(frozen=True)
class PersonalizedResult:
    instance_id: str
    mode: Mode
    task: TaskKind
    gold: str
    personalized: str
    base_response: Optional[str] = None
    context: Optional[RankedContext] = None
    think: str = ""
    parsed: Optional[ParsedLabel] = None
    flags: FrozenSet[ResultFlag] = frozenset()
    error: Optional[str] = None

    @property
    def metrics(self) -> Dict[str, float]:
        return instance_metrics(self.task, self.parsed, self.gold)

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "mode": self.mode.value,
            "base_response": self.base_response,
            "context": self.context.to_dict() if self.context is not None else None,
            "think": self.think,
            "personalized": self.personalized,
            "parsed": self.parsed.render() if self.parsed is not None else None,
            "gold": self.gold,
            "flags": sorted(flag.value for flag in self.flags),
            "metrics": self.metrics,
            "error": self.error,
        }


@dataclass(frozen=True)
class EvalReport:
    name: str
    mode: Mode
    metrics: MetricReport
    config_hash: str
    started_at: str
    finished_at: str
    provider_models: Dict[str, str]
    results: Tuple[PersonalizedResult, ...] = field(default=())

    @property
    def task(self) -> TaskKind:
        return self.metrics.task

    @property
    def n(self) -> int:
        return len(self.results)

    def _rate(self, *flags: ResultFlag) -> float:
        if not self.results:
            return 0.0
        hits = sum(1 for result in self.results if any(flag in result.flags for flag in flags))
        return hits / len(self.results)

    @property
    def parse_failure_rate(self) -> float:
        return self._rate(ResultFlag.FALLBACK_USED, ResultFlag.LABEL_PARSE_FAILURE)

    @property
    def fallback_rate(self) -> float:
        return self._rate(ResultFlag.FALLBACK_USED)

    @property
    def failure_count(self) -> int:
        return sum(1 for result in self.results if ResultFlag.INFERENCE_FAILURE in result.flags)

    def to_dict(self, include_timestamps: bool = True) -> dict:
        payload = {
            "task": self.task.value,
            "mode": self.mode.value,
            "name": self.name,
            "n": self.n,
            "metrics": self.metrics.values(),
            "config_hash": self.config_hash,
            "provider_models": dict(sorted(self.provider_models.items())),
            "parse_failure_rate": self.parse_failure_rate,
            "fallback_rate": self.fallback_rate,
            "failure_count": self.failure_count,
            "results": [result.to_dict() for result in self.results],
        }
        if include_timestamps:
            payload["started_at"] = self.started_at
            payload["finished_at"] = self.finished_at
        return payload

    def results_frame(self) -> pd.DataFrame:
        rows = []
        for result in self.results:
            row = {
                "instance_id": result.instance_id,
                "gold": result.gold,
                "personalized": result.personalized,
                "flags": ",".join(sorted(flag.value for flag in result.flags)),
            }
            row.update(result.metrics)
            rows.append(row)
        return records_to_frame(rows)

    def summary_frame(self) -> pd.DataFrame:
        row = {"name": self.name, "mode": self.mode.value, "n": self.n}
        row.update(self.metrics.values())
        row["parse_failure_rate"] = self.parse_failure_rate
        return pd.DataFrame([row])


def instance_metrics(kind: TaskKind, parsed: Optional[ParsedLabel], gold: str) -> Dict[str, float]:
    profile = kind.metric_profile
    if profile is MetricProfile.CLASSIFICATION:
        try:
            correct = parsed is not None and parsed == parse_label(kind, gold)
        except LabelParseError:
            correct = False
        return {"correct": 1.0 if correct else 0.0}
    if profile is MetricProfile.REGRESSION:
        predicted = parsed.value if isinstance(parsed, Rating) else IMPUTED_RATING
        return {"abs_error": float(abs(predicted - parse_label(kind, gold).value))}
    text = parsed.text if isinstance(parsed, FreeText) else ""
    return {"rouge1": rouge1(text, gold).f1, "rougeL": rougeL(text, gold).f1}


def _parse_answer(kind: TaskKind, text: str) -> Tuple[Optional[ParsedLabel], FrozenSet[ResultFlag]]:
    try:
        return parse_label(kind, text), frozenset()
    except LabelParseError:
        return None, frozenset({ResultFlag.LABEL_PARSE_FAILURE})


def _direct_answer(prompt_text: str, cfg: RunConfig, providers: ProviderSet, iid: str) -> str:
    result = providers.complete(
        CompletionRequest(prompt=prompt_text, sampling=cfg.sampling_for(Role.BASE), role_tag=Role.BASE)
    )
    text = first_text(result).strip()
    if not text:
        raise MalformedResponse(f"base model returned an empty answer for {iid}")
    return text


def _zero_shot(
    instance: TaskInstance,
    cfg: RunConfig,
    providers: ProviderSet,
    store: TemplateStore,
    extra_flags: FrozenSet[ResultFlag] = frozenset(),
) -> PersonalizedResult:
    prompt = render_baseline(
        BaselineMode.ZERO_SHOT, instance.kind, instance, store=store, max_tokens=cfg.max_sequence_tokens
    )
    answer = _direct_answer(prompt.text, cfg, providers, instance.instance_id)
    parsed, flags = _parse_answer(instance.kind, answer)
    return PersonalizedResult(
        instance_id=instance.instance_id,
        mode=cfg.mode,
        task=instance.kind,
        gold=instance.gold,
        personalized=answer,
        base_response=answer,
        parsed=parsed,
        flags=flags | extra_flags,
    )


def rpo_infer(
    instance: TaskInstance,
    cfg: RunConfig,
    providers: ProviderSet,
    retrieval: Optional[RetrievalBackend] = None,
    *,
    store: Optional[TemplateStore] = None,
) -> PersonalizedResult:
    store = store or cfg.template_store()
    retrieval = retrieval or cfg.retrieval_backend()
    iid = instance.instance_id

    base_prompt, base_response = base_generation(
        instance, providers, sampling=cfg.sampling_for(Role.BASE), store=store, max_tokens=cfg.max_sequence_tokens
    )

    def fallback(flags: FrozenSet[ResultFlag], context=None, error=None) -> PersonalizedResult:
        parsed, label_flags = _parse_answer(instance.kind, base_response)
        return PersonalizedResult(
            instance_id=iid,
            mode=cfg.mode,
            task=instance.kind,
            gold=instance.gold,
            personalized=base_response,
            base_response=base_response,
            context=context,
            parsed=parsed,
            flags=flags | label_flags,
            error=error,
        )

    try:
        context = retrieve_topk(instance.profile, form_query(instance.query, base_response), cfg.k, retrieval)
    except EmptyProfile:
        logger.debug("%s has no profile; returning the base answer", iid)
        return fallback(frozenset({ResultFlag.EMPTY_PROFILE, ResultFlag.DEGRADED_TO_ZERO_SHOT}))

    try:
        prompt = render_reflection(
            instance.kind, base_prompt.text, base_response, context, store=store, max_tokens=cfg.max_sequence_tokens
        )
    except TokenBudgetExceeded as exc:
        return fallback(frozenset({ResultFlag.FALLBACK_USED}), context, str(exc))

    result = providers.complete(
        CompletionRequest(prompt=prompt.text, sampling=cfg.sampling_for(Role.REFLECTION), role_tag=Role.REFLECTION)
    )
    try:
        structured = parse_structured(first_text(result), lenient=cfg.lenient_parse, kind=instance.kind)
    except StructuredOutputError as exc:
        logger.debug("%s: reflection output unparseable (%s); using base answer", iid, exc)
        return fallback(frozenset({ResultFlag.FALLBACK_USED}), context, f"{type(exc).__name__}: {exc}")

    parsed, flags = _parse_answer(instance.kind, structured.personalized)
    return PersonalizedResult(
        instance_id=iid,
        mode=cfg.mode,
        task=instance.kind,
        gold=instance.gold,
        personalized=structured.personalized,
        base_response=base_response,
        context=RankedContext(entries=context.entries[: prompt.shot_count], k=context.k),
        think=structured.think,
        parsed=parsed,
        flags=flags,
    )


def baseline_infer(
    instance: TaskInstance,
    cfg: RunConfig,
    providers: ProviderSet,
    retrieval: Optional[RetrievalBackend] = None,
    *,
    store: Optional[TemplateStore] = None,
) -> PersonalizedResult:
    store = store or cfg.template_store()
    if cfg.mode is Mode.ZERO_SHOT:
        return _zero_shot(instance, cfg, providers, store)
    if not instance.profile:
        return _zero_shot(
            instance, cfg, providers, store, frozenset({ResultFlag.EMPTY_PROFILE, ResultFlag.DEGRADED_TO_ZERO_SHOT})
        )

    if cfg.mode is Mode.ICL:
        context = fixed_context(instance.profile, cfg.icl_k)
        prompt = render_baseline(
            BaselineMode.ICL, instance.kind, instance, context, store=store, max_tokens=cfg.max_sequence_tokens
        )
    elif cfg.mode is Mode.RAG:
        retrieval = retrieval or cfg.retrieval_backend()
        context = retrieve_topk(instance.profile, form_query(instance.query), cfg.k, retrieval)
        prompt = render_baseline(
            BaselineMode.RAG,
            instance.kind,
            instance,
            context,
            rag_k=cfg.k,
            store=store,
            max_tokens=cfg.max_sequence_tokens,
        )
    else:
        raise ConfigError(f"{cfg.mode.value} is not a baseline mode")

    answer = _direct_answer(prompt.text, cfg, providers, instance.instance_id)
    parsed, flags = _parse_answer(instance.kind, answer)
    return PersonalizedResult(
        instance_id=instance.instance_id,
        mode=cfg.mode,
        task=instance.kind,
        gold=instance.gold,
        personalized=answer,
        context=RankedContext(entries=context.entries[: prompt.shot_count], k=context.k),
        parsed=parsed,
        flags=flags,
    )


def infer(
    instance: TaskInstance,
    cfg: RunConfig,
    providers: ProviderSet,
    retrieval: Optional[RetrievalBackend] = None,
    *,
    store: Optional[TemplateStore] = None,
) -> PersonalizedResult:
    if cfg.mode is Mode.RPO:
        return rpo_infer(instance, cfg, providers, retrieval, store=store)
    return baseline_infer(instance, cfg, providers, retrieval, store=store)


def _failed_result(instance: TaskInstance, cfg: RunConfig, exc: Exception) -> PersonalizedResult:
    return PersonalizedResult(
        instance_id=instance.instance_id,
        mode=cfg.mode,
        task=instance.kind,
        gold=instance.gold,
        personalized="",
        flags=frozenset({ResultFlag.INFERENCE_FAILURE}),
        error=f"{type(exc).__name__}: {exc}",
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_eval(
    dataset: Sequence[TaskInstance],
    cfg: RunConfig,
    providers: ProviderSet,
    retrieval: Optional[RetrievalBackend] = None,
) -> EvalReport:
    """Evaluate every instance; per-instance failures are kept and scored as unparsed predictions."""

    if not dataset:
        raise EvalError("cannot evaluate an empty dataset")
    kinds = {instance.kind for instance in dataset}
    if kinds != {cfg.task}:
        raise EvalError(
            f"dataset task kinds {sorted(k.value for k in kinds)} do not match config task {cfg.task.value}"
        )

    started_at = _now()
    store = cfg.template_store()
    retrieval = retrieval or cfg.retrieval_backend()
    outcomes = map_bounded(
        lambda inst: infer(inst, cfg, providers, retrieval, store=store), dataset, cfg.max_in_flight
    )
    results: List[PersonalizedResult] = []
    for instance, outcome in zip(dataset, outcomes):
        if isinstance(outcome, Exception):
            logger.warning("inference failed for %s: %s", instance.instance_id, outcome)
            outcome = _failed_result(instance, cfg, outcome)
        results.append(outcome)

    metrics = compute_metric_report(cfg.task, [r.parsed for r in results], [r.gold for r in results])
    report = EvalReport(
        name=cfg.name,
        mode=cfg.mode,
        metrics=metrics,
        config_hash=config_hash(cfg),
        started_at=started_at,
        finished_at=_now(),
        provider_models=providers.models(),
        results=tuple(results),
    )
    logger.info(
        "%s (%s, %s): n=%d %s parse-failure rate %.3f, %d failures",
        cfg.name,
        cfg.mode.value,
        cfg.task.value,
        report.n,
        metrics.values(),
        report.parse_failure_rate,
        report.failure_count,
    )
    return report


def provider_set_for(cfg: RunConfig) -> ProviderSet:
    return build_providers(cfg.endpoints)


def compare_modes(
    dataset: Sequence[TaskInstance],
    cfgs: Sequence[RunConfig],
    providers_for: Callable[[RunConfig], ProviderSet] = provider_set_for,
) -> pd.DataFrame:
    """One row per config with its task metrics and ``delta_<metric>`` against the first row."""

    if len(cfgs) < 2:
        raise EvalError(f"comparison needs at least two configs, got {len(cfgs)}")
    metric_names: List[str] = []
    for cfg in cfgs:
        for name in cfg.task.profile["metrics"]:
            if name not in metric_names:
                metric_names.append(name)

    rows = []
    for cfg in cfgs:
        row = {"name": cfg.name, "mode": cfg.mode.value, "task": cfg.task.value}
        try:
            report = run_eval(dataset, cfg, providers_for(cfg))
        except Exception as exc:  # pylint: disable=broad-except
            logger.error("comparison row %s failed: %s", cfg.name, exc)
            row.update({"n": 0, **{name: np.nan for name in metric_names}, "error": f"{type(exc).__name__}: {exc}"})
        else:
            values = report.metrics.values()
            row.update({"n": report.n, **{name: values.get(name, np.nan) for name in metric_names}, "error": ""})
        rows.append(row)

    frame = pd.DataFrame(rows, columns=["name", "mode", "task", "n", *metric_names, "error"])
    for name in metric_names:
        frame[f"delta_{name}"] = frame[name] - frame[name].iloc[0]
    return frame


def format_table(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, float_format=lambda value: f"{value:.4f}", na_rep="-")


def load_instances(cfg: RunConfig, side: str = "all") -> List[TaskInstance]:
    """Read ``cfg.paths.dataset`` and return the requested side of the configured split."""

    if not cfg.paths.dataset:
        raise ConfigError("paths.dataset is not set")
    instances = load_dataset(cfg.paths.dataset, cfg.task)
    if side == "all":
        return instances
    if cfg.split.mode is SplitMode.TIME:
        split = split_time(instances, cfg.split.test_fraction)
    else:
        split = split_users(instances, cfg.split.n_train_users, cfg.split.n_test_users, cfg.seeds.split)
    return list(split.side(side))
