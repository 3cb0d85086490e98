"""Evaluation metrics and reward shaping for rewrite candidates."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from structured_output import FreeText, LabelParseError, ParsedLabel, Rating, Tag, parse_label
from task_config import MOVIE_TAGS, MetricProfile, TaskKind

DEFAULT_BETA = 0.01
DEFAULT_GENERATION_WEIGHTS = (0.5, 0.5)
IMPUTED_RATING = 3
_UNPARSED = "<unparsed>"
_TOKEN_RE = re.compile(r"[^\W_]+")


class MetricInputError(ValueError):
    pass


class EmptyInput(MetricInputError):
    pass


class LengthMismatch(MetricInputError):
    pass


class EmptyTrace(MetricInputError):
    pass


class KLEstimator(str, Enum):
    K1 = "K1"
    K3 = "K3"


class RougeScore(NamedTuple):
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricReport:
    task: TaskKind
    n: int
    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    mae: Optional[float] = None
    rmse: Optional[float] = None
    rouge1: Optional[float] = None
    rougeL: Optional[float] = None

    def values(self) -> dict:
        names = self.task.profile["metrics"]
        return {name: getattr(self, name) for name in names}

    def to_dict(self) -> dict:
        payload = {"task": self.task.value, "n": self.n}
        payload.update(self.values())
        return payload


@dataclass(frozen=True)
class TraceStep:
    index: int
    token_text: str
    policy_logprob: float
    ref_logprob: float


@dataclass(frozen=True)
class LogprobTrace:
    steps: Tuple[TraceStep, ...]

    def __post_init__(self) -> None:
        for expected, step in enumerate(self.steps, start=1):
            if step.index != expected:
                raise MetricInputError(f"trace indices must be contiguous from 1, got {step.index} at {expected}")
            if step.policy_logprob > 0 or step.ref_logprob > 0:
                raise MetricInputError(f"positive logprob at step {step.index}")

    @classmethod
    def from_logprobs(
        cls,
        policy: Sequence[float],
        ref: Sequence[float],
        tokens: Optional[Sequence[str]] = None,
    ) -> "LogprobTrace":
        if len(policy) != len(ref):
            raise LengthMismatch(f"policy trace has {len(policy)} steps, reference has {len(ref)}")
        tokens = list(tokens) if tokens is not None and len(tokens) == len(policy) else [""] * len(policy)
        return cls(
            steps=tuple(
                TraceStep(index=i, token_text=tok, policy_logprob=float(p), ref_logprob=float(r))
                for i, (tok, p, r) in enumerate(zip(tokens, policy, ref), start=1)
            )
        )

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def policy_logprobs(self) -> List[float]:
        return [step.policy_logprob for step in self.steps]

    @property
    def ref_logprobs(self) -> List[float]:
        return [step.ref_logprob for step in self.steps]


@dataclass(frozen=True)
class ShapedReward:
    per_token: Tuple[float, ...]
    task_reward: float
    beta: float
    kl: Tuple[float, ...] = field(default=())


def _check_pairs(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise EmptyInput("metrics need at least one prediction")


def _label_key(value) -> str:
    if value is None or isinstance(value, BaseException):
        return _UNPARSED
    if isinstance(value, (Tag, Rating, FreeText)):
        return value.render()
    return str(value)


def accuracy(preds: Sequence, golds: Sequence) -> float:
    _check_pairs(preds, golds)
    return float(accuracy_score([_label_key(g) for g in golds], [_label_key(p) for p in preds]))


def macro_f1(preds: Sequence, golds: Sequence, label_set: Sequence[str]) -> float:
    """Unweighted mean of per-label F1 over ``label_set``; 0/0 counts as 0."""

    _check_pairs(preds, golds)
    return float(
        f1_score(
            [_label_key(g) for g in golds],
            [_label_key(p) for p in preds],
            labels=list(label_set),
            average="macro",
            zero_division=0,
        )
    )


def _rating_value(value) -> int:
    if isinstance(value, Rating):
        return value.value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value)
    if isinstance(value, str):
        try:
            return parse_label(TaskKind.PRODUCT_RATING, value).value
        except LabelParseError:
            return IMPUTED_RATING
    return IMPUTED_RATING


def mae_rmse(preds: Sequence, golds: Sequence) -> Tuple[float, float]:
    """Parse failures in ``preds`` are scored as the mid-scale rating 3."""

    _check_pairs(preds, golds)
    predicted = np.array([_rating_value(p) for p in preds], dtype=float)
    expected = np.array([_rating_value(g) for g in golds], dtype=float)
    errors = predicted - expected
    return float(np.mean(np.abs(errors))), float(np.sqrt(np.mean(errors ** 2)))


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall((text or "").lower())


def _prf(overlap: int, n_candidate: int, n_reference: int) -> RougeScore:
    precision = overlap / n_candidate if n_candidate else 0.0
    recall = overlap / n_reference if n_reference else 0.0
    if precision + recall == 0:
        return RougeScore(precision, recall, 0.0)
    return RougeScore(precision, recall, 2 * precision * recall / (precision + recall))


def rouge1(candidate: str, reference: str) -> RougeScore:
    cand, ref = tokenize(candidate), tokenize(reference)
    overlap = sum((Counter(cand) & Counter(ref)).values())
    return _prf(overlap, len(cand), len(ref))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rougeL(candidate: str, reference: str) -> RougeScore:  # noqa: N802
    cand, ref = tokenize(candidate), tokenize(reference)
    return _prf(lcs_length(cand, ref), len(cand), len(ref))


def task_reward(
    kind: TaskKind,
    parsed: Union[ParsedLabel, BaseException, None],
    gold: str,
    *,
    weights: Sequence[float] = DEFAULT_GENERATION_WEIGHTS,
) -> float:
    """Scalar reward in [0, 1] for one candidate; any parse failure scores 0."""

    if parsed is None or isinstance(parsed, BaseException):
        return 0.0
    profile = kind.metric_profile
    if profile is MetricProfile.CLASSIFICATION:
        if not isinstance(parsed, Tag):
            return 0.0
        return 1.0 if parsed.value == parse_label(kind, gold).value else 0.0
    if profile is MetricProfile.REGRESSION:
        if not isinstance(parsed, Rating):
            return 0.0
        return 1.0 - abs(parsed.value - parse_label(kind, gold).value) / 4.0
    if not isinstance(parsed, FreeText):
        return 0.0
    w1, wl = _check_weights(weights)
    return w1 * rouge1(parsed.text, gold).f1 + wl * rougeL(parsed.text, gold).f1


def _check_weights(weights: Sequence[float]) -> Tuple[float, float]:
    if len(weights) != 2 or any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise MetricInputError(f"generation reward weights must be two non-negative values summing to 1, got {weights}")
    return float(weights[0]), float(weights[1])


def kl_per_token(trace: LogprobTrace, estimator: KLEstimator = KLEstimator.K1) -> List[float]:
    if not len(trace):
        raise EmptyTrace("KL needs at least one token")
    estimator = KLEstimator(estimator)
    values = []
    for step in trace.steps:
        if estimator is KLEstimator.K1:
            values.append(step.policy_logprob - step.ref_logprob)
        else:
            log_ratio = step.ref_logprob - step.policy_logprob
            # rho - 1 - ln(rho) with rho = exp(log_ratio); clamp rounding below zero
            values.append(max(0.0, math.expm1(log_ratio) - log_ratio))
    return values


def shape_rewards(task_reward: float, kl: Sequence[float], beta: float = DEFAULT_BETA) -> ShapedReward:
    if not kl:
        raise EmptyTrace("reward shaping needs at least one token")
    if beta < 0:
        raise MetricInputError(f"beta must be non-negative, got {beta}")
    per_token = [0.0 - beta * value for value in kl]
    per_token[-1] += task_reward
    return ShapedReward(per_token=tuple(per_token), task_reward=float(task_reward), beta=float(beta), kl=tuple(kl))


def compute_metric_report(kind: TaskKind, preds: Sequence, golds: Sequence[str]) -> MetricReport:
    """Task-appropriate metric pair over a prediction list; ``None`` marks a parse failure."""

    _check_pairs(preds, golds)
    profile = kind.metric_profile
    n = len(preds)
    if profile is MetricProfile.CLASSIFICATION:
        gold_labels = [parse_label(kind, g) for g in golds]
        return MetricReport(
            task=kind,
            n=n,
            accuracy=accuracy(preds, gold_labels),
            macro_f1=macro_f1(preds, gold_labels, MOVIE_TAGS),
        )
    if profile is MetricProfile.REGRESSION:
        mae, rmse = mae_rmse(preds, golds)
        return MetricReport(task=kind, n=n, mae=mae, rmse=rmse)

    candidates = [p.text if isinstance(p, FreeText) else "" for p in preds]
    r1 = [rouge1(c, g).f1 for c, g in zip(candidates, golds)]
    rl = [rougeL(c, g).f1 for c, g in zip(candidates, golds)]
    return MetricReport(task=kind, n=n, rouge1=float(np.mean(r1)), rougeL=float(np.mean(rl)))
