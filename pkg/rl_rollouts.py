"""Curriculum scheduling, group advantages and rollout-record assembly for an external RL trainer."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from data_processing import write_json_atomic, write_jsonl_atomic
from lamp_dataset import ProfileEntry, TaskInstance
from llm_utils import CompletionRequest, MalformedResponse, ProviderSet, Role, SamplingConfig, map_bounded
from metrics import (
    DEFAULT_BETA,
    DEFAULT_GENERATION_WEIGHTS,
    KLEstimator,
    LogprobTrace,
    ShapedReward,
    kl_per_token,
    shape_rewards,
    task_reward,
)
from profile_retrieval import RankedContext, RetrievalBackend, form_query, retrieve_topk
from prompt_templates import DEFAULT_MAX_SEQUENCE_TOKENS, TemplateStore, render_reflection
from structured_output import LabelParseError, StructuredOutputError, format_structured, parse_label, parse_structured
from trajectory import RewriteTrajectory, base_generation

logger = logging.getLogger(__name__)

ACTOR_LR = 5e-7
CRITIC_LR = 9e-6
SFT_LR = 5e-6
SFT_WARMUP_RATIO = 0.05
SFT_BATCH_SIZE = 8


class RolloutError(ValueError):
    pass


class GroupSizeMismatch(RolloutError):
    pass


class EmptyPool(RolloutError):
    pass


class EmptySequence(RolloutError):
    pass


class PositiveLogprob(RolloutError):
    pass


class CurriculumUnit(str, Enum):
    EPOCH = "Epoch"
    STEP = "Step"


@dataclass(frozen=True)
class CurriculumConfig:
    """Shot-count schedule ``k = min(k_max, k_min + (e - 1) // e_step)``.

    With ``unit=Step`` and ``total_steps`` set, ``e_step`` is sized so the whole ramp fits in one
    epoch of ``total_steps`` optimizer steps. ``e_step`` defaults to 1.
    """

    k_min: int = 2
    k_max: int = 6
    e_step: Optional[int] = None
    unit: CurriculumUnit = CurriculumUnit.STEP
    total_steps: Optional[int] = None

    def __post_init__(self) -> None:
        if self.k_min < 1 or self.k_min > self.k_max:
            raise ValueError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.total_steps is not None:
            if self.unit is not CurriculumUnit.STEP:
                raise ValueError("total_steps sizes a Step-unit schedule; the Epoch unit takes e_step only")
            if self.total_steps < 1:
                raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
            levels = self.k_max - self.k_min + 1
            sized = max(1, math.ceil(self.total_steps / levels))
            if self.e_step is not None and self.e_step != sized:
                raise ValueError(f"e_step {self.e_step} conflicts with total_steps {self.total_steps} (needs {sized})")
            object.__setattr__(self, "e_step", sized)
        elif self.e_step is None:
            object.__setattr__(self, "e_step", 1)
        if self.e_step < 1:
            raise ValueError(f"e_step must be >= 1, got {self.e_step}")

    @classmethod
    def for_single_epoch(cls, total_steps: int, k_min: int = 2, k_max: int = 6) -> "CurriculumConfig":
        """Step-unit schedule whose k_min..k_max ramp spans ``total_steps``."""

        return cls(k_min=k_min, k_max=k_max, unit=CurriculumUnit.STEP, total_steps=total_steps)

    def to_dict(self) -> dict:
        return {
            "k_min": self.k_min,
            "k_max": self.k_max,
            "e_step": self.e_step,
            "unit": self.unit.value,
            "total_steps": self.total_steps,
        }


@dataclass(frozen=True)
class AdvantageConfig:
    group_size: int = 16
    whiten_batch: bool = True
    epsilon: float = 1e-8


@dataclass(frozen=True)
class SftNllResult:
    total_nll: float
    per_token: Tuple[float, ...]
    T: int


@dataclass(frozen=True)
class RolloutSettings:
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    advantage: AdvantageConfig = field(default_factory=AdvantageConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig.rollout_defaults)
    base_sampling: SamplingConfig = field(default_factory=SamplingConfig)
    beta: float = DEFAULT_BETA
    kl_estimator: KLEstimator = KLEstimator.K1
    generation_weights: Tuple[float, float] = DEFAULT_GENERATION_WEIGHTS
    lenient_parse: bool = False
    store: Optional[TemplateStore] = None
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS
    max_in_flight: int = 8
    seed: int = 0


@dataclass(frozen=True)
class RolloutRecord:
    instance_id: str
    prompt_text: str
    k: int
    shot_count: int
    candidate: str
    trace: Optional[LogprobTrace]
    shaped: ShapedReward
    group_advantage: float
    advantage: float
    group_id: str
    seed: int
    whitened: bool = False
    error: Optional[str] = None
    policy_logprobs: Tuple[float, ...] = ()

    @property
    def task_reward(self) -> float:
        return self.shaped.task_reward

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "prompt": self.prompt_text,
            "k": self.k,
            "candidate": self.candidate,
            "policy_logprobs": list(self.policy_logprobs),
            "ref_logprobs": self.trace.ref_logprobs if self.trace else None,
            "kl": list(self.shaped.kl),
            "per_token_rewards": list(self.shaped.per_token),
            "task_reward": self.shaped.task_reward,
            "advantage": self.advantage,
            "group_id": self.group_id,
            "seed": self.seed,
            "shot_count": self.shot_count,
            "group_advantage": self.group_advantage,
            "whitened": self.whitened,
            "error": self.error,
        }


def curriculum_k(e: int, cfg: CurriculumConfig) -> int:
    if e < 1:
        raise ValueError(f"epoch/step index starts at 1, got {e}")
    return min(cfg.k_max, cfg.k_min + (e - 1) // cfg.e_step)


def sample_shots(context_pool: RankedContext, k: int, seed: int = 0) -> List[ProfileEntry]:
    """Top-``k`` of the ranked pool; ``seed`` is kept for parity with the random retrieval backend."""

    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if context_pool is None or not len(context_pool):
        raise EmptyPool("no profile entries to sample shots from")
    return list(context_pool.profile_entries[:k])


def advantages(group_rewards: Sequence[float], cfg: AdvantageConfig) -> List[float]:
    """Group-mean baseline; batch whitening is applied separately by ``batch_advantages``."""

    if len(group_rewards) != cfg.group_size:
        raise GroupSizeMismatch(f"expected {cfg.group_size} rewards, got {len(group_rewards)}")
    mean = math.fsum(group_rewards) / len(group_rewards)
    return [float(r) - mean for r in group_rewards]


def whiten(values: Sequence[float], epsilon: float = 1e-8) -> List[float]:
    array = np.asarray(values, dtype=float)
    if array.size == 0:
        return []
    return list(((array - array.mean()) / (array.std() + epsilon)).tolist())


def batch_advantages(groups: Sequence[Sequence[float]], cfg: AdvantageConfig) -> List[List[float]]:
    per_group = [advantages(group, cfg) for group in groups]
    if not cfg.whiten_batch:
        return per_group
    flat = whiten([a for group in per_group for a in group], cfg.epsilon)
    result, offset = [], 0
    for group in per_group:
        result.append(flat[offset:offset + len(group)])
        offset += len(group)
    return result


def sft_nll(target_token_logprobs: Sequence[float]) -> SftNllResult:
    if not target_token_logprobs:
        raise EmptySequence("SFT target has no tokens")
    for position, value in enumerate(target_token_logprobs, start=1):
        if value > 0:
            raise PositiveLogprob(f"log-prob {value} at token {position} is positive")
    values = tuple(float(v) for v in target_token_logprobs)
    return SftNllResult(total_nll=0.0 - math.fsum(values), per_token=values, T=len(values))


def _score_candidate(kind, text: str, gold: str, settings: RolloutSettings) -> float:
    try:
        structured = parse_structured(text, lenient=settings.lenient_parse, kind=kind)
        parsed = parse_label(kind, structured.personalized)
    except (StructuredOutputError, LabelParseError) as exc:
        return task_reward(kind, exc, gold)
    return task_reward(kind, parsed, gold, weights=settings.generation_weights)


def build_rollouts(
    instance: TaskInstance,
    e: int,
    settings: RolloutSettings,
    providers: ProviderSet,
    retrieval: Optional[RetrievalBackend] = None,
    scoring_in_flight: Optional[int] = None,
) -> List[RolloutRecord]:
    """One group of reflection candidates for ``instance`` at curriculum position ``e``.

    Advantages are group-mean baselines only; ``build_rollout_batch`` applies batch whitening.
    Candidates that cannot be scored by the reference model stay in the group with reward 0 and
    keep their policy log-probs. Reference scoring conditions on the raw reflection prompt text,
    without the chat template the policy endpoint applied, so token counts can disagree with the
    policy trace; such candidates carry a ``LengthMismatch`` error.

    ``scoring_in_flight`` bounds concurrent reference calls for this group and defaults to
    ``settings.max_in_flight``.
    """

    group_size = settings.advantage.group_size
    k = curriculum_k(e, settings.curriculum)
    base_prompt, base_response = base_generation(
        instance, providers, sampling=settings.base_sampling, store=settings.store, max_tokens=settings.max_tokens
    )
    pool = retrieve_topk(
        instance.profile, form_query(instance.query, base_response), settings.curriculum.k_max, retrieval
    )
    shots = sample_shots(pool, k, settings.seed)
    context = RankedContext(entries=pool.entries[: len(shots)], k=k)
    prompt = render_reflection(
        instance.kind, base_prompt.text, base_response, context, store=settings.store, max_tokens=settings.max_tokens
    )

    sampling = dataclasses.replace(settings.sampling, n_samples=group_size)
    result = providers.complete(
        CompletionRequest(prompt=prompt.text, sampling=sampling, want_logprobs=True, role_tag=Role.REFLECTION)
    )
    if result.logprob_traces is None or len(result.logprob_traces) != len(result.texts):
        raise MalformedResponse(f"reflection endpoint returned no per-candidate log-probs for {instance.instance_id}")
    ref_traces = providers.score_batch(
        [(prompt.text, text) for text in result.texts],
        Role.REFERENCE,
        scoring_in_flight or settings.max_in_flight,
    )

    rewards: List[float] = []
    pending = []
    for text, policy_trace, ref in zip(result.texts, result.logprob_traces, ref_traces):
        error = None
        trace = None
        try:
            if isinstance(ref, Exception):
                raise ref
            trace = LogprobTrace.from_logprobs(
                [lp for _, lp in policy_trace], ref, tokens=[tok for tok, _ in policy_trace]
            )
            kl = kl_per_token(trace, settings.kl_estimator)
            reward = _score_candidate(instance.kind, text, instance.gold, settings)
            shaped = shape_rewards(reward, kl, settings.beta)
        except Exception as exc:  # pylint: disable=broad-except
            error = f"{type(exc).__name__}: {exc}"
            trace = None
            reward = 0.0
            shaped = ShapedReward(per_token=(0.0,), task_reward=0.0, beta=settings.beta, kl=(0.0,))
        rewards.append(reward)
        pending.append((text, tuple(lp for _, lp in policy_trace), trace, shaped, error))

    group_adv = advantages(rewards, settings.advantage)
    group_id = f"{instance.instance_id}:e{e}"
    records = [
        RolloutRecord(
            instance_id=instance.instance_id,
            prompt_text=prompt.text,
            k=k,
            shot_count=prompt.shot_count,
            candidate=text,
            trace=trace,
            shaped=shaped,
            group_advantage=adv,
            advantage=adv,
            group_id=group_id,
            seed=settings.seed,
            error=error,
            policy_logprobs=policy_logprobs,
        )
        for (text, policy_logprobs, trace, shaped, error), adv in zip(pending, group_adv)
    ]
    logger.debug("rollout group %s: k=%d rewards=%s", group_id, k, rewards)
    return records


def build_rollout_batch(
    instances: Sequence[TaskInstance],
    e: int,
    settings: RolloutSettings,
    providers: ProviderSet,
    retrieval: Optional[RetrievalBackend] = None,
) -> Tuple[List[RolloutRecord], List[Tuple[str, str]]]:
    """Rollout groups for a batch plus ``(instance_id, error)`` for instances that produced none.

    Up to ``max_in_flight`` groups run at once and each issues its requests one at a time, so no
    more than ``max_in_flight`` requests are outstanding.
    """

    outcomes = map_bounded(
        lambda inst: build_rollouts(inst, e, settings, providers, retrieval, scoring_in_flight=1),
        instances,
        settings.max_in_flight,
    )
    groups: List[List[RolloutRecord]] = []
    failures: List[Tuple[str, str]] = []
    for instance, outcome in zip(instances, outcomes):
        if isinstance(outcome, Exception):
            failures.append((instance.instance_id, f"{type(outcome).__name__}: {outcome}"))
            logger.warning("rollout for %s failed: %s", instance.instance_id, outcome)
        else:
            groups.append(outcome)

    if settings.advantage.whiten_batch and groups:
        flat = whiten([r.group_advantage for group in groups for r in group], settings.advantage.epsilon)
        records = [
            dataclasses.replace(record, advantage=value, whitened=True)
            for record, value in zip((r for group in groups for r in group), flat)
        ]
    else:
        records = [r for group in groups for r in group]
    logger.info("built %d rollout records from %d/%d instances", len(records), len(groups), len(instances))
    return records, failures


def export_rollouts(records: Sequence[RolloutRecord], path: str) -> int:
    return write_jsonl_atomic((record.to_dict() for record in records), path)


def trainer_sidecar(settings: RolloutSettings) -> dict:
    return {
        "actor_lr": ACTOR_LR,
        "critic_lr": CRITIC_LR,
        "beta": settings.beta,
        "group_size": settings.advantage.group_size,
        "kl_estimator": KLEstimator(settings.kl_estimator).value,
        "whiten_batch": settings.advantage.whiten_batch,
        "curriculum": settings.curriculum.to_dict(),
        "sft_lr": SFT_LR,
        "sft_warmup_ratio": SFT_WARMUP_RATIO,
        "sft_batch_size": SFT_BATCH_SIZE,
        "sft_epochs": 1,
        "rl_epochs": 1,
        "sampling": {
            "temperature": settings.sampling.temperature,
            "top_p": settings.sampling.top_p,
            "n": settings.advantage.group_size,
        },
    }


def write_trainer_sidecar(settings: RolloutSettings, path: str) -> None:
    write_json_atomic(trainer_sidecar(settings), path)


def score_sft_target(
    record: RewriteTrajectory,
    providers: ProviderSet,
    *,
    store: Optional[TemplateStore] = None,
    max_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS,
) -> SftNllResult:
    """Sequence NLL of an SFT record's structured target under the reflection endpoint."""

    context = RankedContext(entries=((record.p_star, 1.0),), k=1)
    prompt = render_reflection(
        record.task, record.query, record.base_response, context, store=store, max_tokens=max_tokens
    )
    target = format_structured(record.think, record.personalized)
    return sft_nll(providers.score_logprobs(prompt.text, target, Role.REFLECTION))
