"""Run configuration: one JSON document parsed into frozen dataclasses."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from data_processing import load_json
from lamp_dataset import DEFAULT_TEST_FRACTION, SplitMode
from llm_utils import EndpointConfig, Role, SamplingConfig
from metrics import DEFAULT_BETA, DEFAULT_GENERATION_WEIGHTS, KLEstimator
from profile_retrieval import BackendKind, EmbeddingEndpoint, RetrievalBackend
from prompt_templates import DEFAULT_MAX_SEQUENCE_TOKENS, DEFAULT_TEACHER_VERSION, DEFAULT_TEMPLATE_DIR, TemplateStore
from rl_rollouts import AdvantageConfig, CurriculumConfig, CurriculumUnit, RolloutSettings
from task_config import DEFAULT_TASK_KEY, TaskKind
from trajectory import ConsistencyMode, ConsistencyRule, FilterPolicy, TrajectorySettings

logger = logging.getLogger(__name__)

DEFAULT_RAG_K = 4
DEFAULT_ICL_K = 4
DEFAULT_MAX_IN_FLIGHT = 8

ROLE_KEYS: Dict[str, Role] = {
    "base": Role.BASE,
    "reflection": Role.REFLECTION,
    "teacher": Role.TEACHER,
    "reference": Role.REFERENCE,
}


class ConfigError(ValueError):
    pass


class Mode(str, Enum):
    RPO = "RPO"
    ZERO_SHOT = "ZeroShot"
    ICL = "ICL"
    RAG = "RAG"


@dataclass(frozen=True)
class RetrievalSettings:
    backend: BackendKind = BackendKind.LEXICAL
    seed: Optional[int] = None
    endpoint: Optional[EmbeddingEndpoint] = None

    def to_backend(self) -> RetrievalBackend:
        try:
            return RetrievalBackend(kind=self.backend, seed=self.seed, endpoint=self.endpoint)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SplitConfig:
    mode: SplitMode = SplitMode.USER
    n_train_users: int = 100
    n_test_users: int = 50
    test_fraction: float = DEFAULT_TEST_FRACTION


@dataclass(frozen=True)
class SeedsConfig:
    split: int = 0
    sampling: int = 0
    retrieval: int = 0


@dataclass(frozen=True)
class PathsConfig:
    dataset: Optional[str] = None
    templates: Optional[str] = None
    output_dir: str = "outputs"
    sft_out: Optional[str] = None


def _default_sampling() -> Dict[Role, SamplingConfig]:
    return {Role.BASE: SamplingConfig(), Role.REFLECTION: SamplingConfig(), Role.TEACHER: SamplingConfig()}


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    task: TaskKind = DEFAULT_TASK_KEY
    mode: Mode = Mode.RPO
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    k: int = DEFAULT_RAG_K
    icl_k: int = DEFAULT_ICL_K
    sampling: Mapping[Role, SamplingConfig] = field(default_factory=_default_sampling)
    rollout_sampling: SamplingConfig = field(default_factory=SamplingConfig.rollout_defaults)
    endpoints: Mapping[Role, EndpointConfig] = field(default_factory=dict)
    beta: float = DEFAULT_BETA
    kl_estimator: KLEstimator = KLEstimator.K1
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    advantage: AdvantageConfig = field(default_factory=AdvantageConfig)
    filter_policy: FilterPolicy = field(default_factory=FilterPolicy)
    generation_reward_weights: Tuple[float, float] = DEFAULT_GENERATION_WEIGHTS
    split: SplitConfig = field(default_factory=SplitConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    lenient_parse: bool = False
    max_sequence_tokens: int = DEFAULT_MAX_SEQUENCE_TOKENS
    teacher_template_version: str = DEFAULT_TEACHER_VERSION
    # resolved path -> path as written in the config file
    written_paths: Mapping[str, str] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.k < 1 or self.icl_k < 1:
            raise ConfigError(f"k and icl_k must be >= 1, got {self.k}, {self.icl_k}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.max_in_flight < 1:
            raise ConfigError(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        if self.rollout_sampling.n_samples != self.advantage.group_size:
            raise ConfigError(
                f"rollout_sampling.n_samples ({self.rollout_sampling.n_samples}) "
                f"must equal advantage.group_size ({self.advantage.group_size})"
            )
        needed = (Role.BASE, Role.REFLECTION) if self.mode is Mode.RPO else (Role.BASE,)
        self.require(needed, purpose=f"{self.mode.value} mode")

    def require(self, roles: Iterable[Role], purpose: str = "this command") -> None:
        missing = [role.value for role in roles if role not in self.endpoints]
        if missing:
            raise ConfigError(f"{purpose} needs endpoint(s) for {', '.join(missing)}")

    def sampling_for(self, role: Role) -> SamplingConfig:
        return self.sampling.get(role) or SamplingConfig()

    # derived settings

    def template_store(self) -> TemplateStore:
        return TemplateStore(self.paths.templates or DEFAULT_TEMPLATE_DIR, teacher_version=self.teacher_template_version)

    def retrieval_backend(self) -> RetrievalBackend:
        return self.retrieval.to_backend()

    def curriculum_for(self, total_steps: Optional[int] = None) -> CurriculumConfig:
        """The configured schedule, or a single-epoch Step schedule spanning ``total_steps``."""

        if total_steps is None:
            return self.curriculum
        if self.curriculum.unit is not CurriculumUnit.STEP:
            raise ConfigError("total_steps needs a Step-unit curriculum")
        try:
            return CurriculumConfig.for_single_epoch(total_steps, self.curriculum.k_min, self.curriculum.k_max)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def rollout_settings(
        self, store: Optional[TemplateStore] = None, total_steps: Optional[int] = None
    ) -> RolloutSettings:
        return RolloutSettings(
            curriculum=self.curriculum_for(total_steps),
            advantage=self.advantage,
            sampling=self.rollout_sampling,
            base_sampling=self.sampling_for(Role.BASE),
            beta=self.beta,
            kl_estimator=self.kl_estimator,
            generation_weights=self.generation_reward_weights,
            lenient_parse=self.lenient_parse,
            store=store or self.template_store(),
            max_tokens=self.max_sequence_tokens,
            max_in_flight=self.max_in_flight,
            seed=self.seeds.sampling,
        )

    def trajectory_settings(self, store: Optional[TemplateStore] = None) -> TrajectorySettings:
        return TrajectorySettings(
            store=store or self.template_store(),
            retrieval=self.retrieval_backend(),
            base_sampling=self.sampling_for(Role.BASE),
            teacher_sampling=self.sampling_for(Role.TEACHER),
            max_tokens=self.max_sequence_tokens,
        )

    # serialization

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task": self.task.value,
            "mode": self.mode.value,
            "retrieval": {
                "backend": self.retrieval.backend.value,
                "seed": self.retrieval.seed,
                "endpoint": asdict(self.retrieval.endpoint) if self.retrieval.endpoint else None,
            },
            "k": self.k,
            "icl_k": self.icl_k,
            "sampling": {key: asdict(self.sampling[role]) for key, role in ROLE_KEYS.items() if role in self.sampling},
            "rollout_sampling": asdict(self.rollout_sampling),
            "endpoints": {
                key: _endpoint_dict(self.endpoints[role], self.written_paths) for key, role in ROLE_KEYS.items() if role in self.endpoints
            },
            "beta": self.beta,
            "kl_estimator": self.kl_estimator.value,
            "curriculum": self.curriculum.to_dict(),
            "advantage": asdict(self.advantage),
            "filter_policy": {
                "brevity_cap_words": self.filter_policy.brevity_cap_words,
                "consistency": {
                    kind.value: {"mode": rule.mode.value, "threshold": rule.threshold}
                    for kind, rule in sorted(self.filter_policy.consistency.items(), key=lambda item: item[0].value)
                },
            },
            "generation_reward_weights": list(self.generation_reward_weights),
            "split": {**asdict(self.split), "mode": self.split.mode.value},
            "seeds": asdict(self.seeds),
            "paths": {key: self.written_paths.get(value, value) for key, value in asdict(self.paths).items()},
            "max_in_flight": self.max_in_flight,
            "lenient_parse": self.lenient_parse,
            "max_sequence_tokens": self.max_sequence_tokens,
            "teacher_template_version": self.teacher_template_version,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Optional[str] = None) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("run config must be a JSON object")
        _reject_unknown(data, {f.name for f in fields(cls)} - {"written_paths"}, "run config")
        try:
            return _build(data, base_dir)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            data = load_json(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config = cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
        logger.debug("loaded config %s (%s, %s)", path, config.task.value, config.mode.value)
        return config


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _endpoint_dict(endpoint: EndpointConfig, written_paths: Mapping[str, str]) -> dict:
    payload = asdict(endpoint)
    if endpoint.script:
        payload["script"] = written_paths.get(endpoint.script, endpoint.script)
    payload["fallback_models"] = list(endpoint.fallback_models)
    return payload


def _reject_unknown(data: Mapping[str, Any], allowed: Iterable[str], where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _section(data: Mapping[str, Any], key: str) -> Mapping[str, Any]:
    value = data.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"{key} must be a JSON object")
    return value


def _dataclass_from(cls, data: Mapping[str, Any], where: str, **converters):
    _reject_unknown(data, {f.name for f in fields(cls)}, where)
    kwargs = {}
    for name, value in data.items():
        convert = converters.get(name)
        kwargs[name] = convert(value) if convert and value is not None else value
    return cls(**kwargs)


def _resolve(path: Optional[str], base_dir: Optional[str], written: Optional[Dict[str, str]] = None) -> Optional[str]:
    if path is None or base_dir is None or os.path.isabs(path):
        return path
    resolved = os.path.normpath(os.path.join(base_dir, path))
    if written is not None:
        written[resolved] = path
    return resolved


def _role_key(key: str) -> Role:
    role = ROLE_KEYS.get(str(key).lower())
    if role is None:
        try:
            role = Role.parse(key)
        except ValueError:
            raise ConfigError(f"unknown role {key!r}; expected one of {', '.join(ROLE_KEYS)}") from None
    return role


def _endpoint(
    data: Mapping[str, Any], where: str, base_dir: Optional[str], written: Optional[Dict[str, str]] = None
) -> EndpointConfig:
    endpoint = _dataclass_from(EndpointConfig, data, where, fallback_models=tuple)
    if endpoint.kind not in ("openai", "mock"):
        raise ConfigError(f"{where}: kind must be 'openai' or 'mock', got {endpoint.kind!r}")
    if endpoint.kind == "mock" and not endpoint.script:
        raise ConfigError(f"{where}: mock endpoints need a script path")
    if endpoint.script:
        return EndpointConfig(**{**asdict(endpoint), "script": _resolve(endpoint.script, base_dir, written),
                                 "fallback_models": endpoint.fallback_models})
    return endpoint


def _filter_policy(data: Mapping[str, Any]) -> FilterPolicy:
    _reject_unknown(data, {"brevity_cap_words", "consistency"}, "filter_policy")
    rules = dict(FilterPolicy().consistency)
    for task_key, rule in (data.get("consistency") or {}).items():
        _reject_unknown(rule, {"mode", "threshold"}, f"filter_policy.consistency.{task_key}")
        rules[TaskKind.parse(task_key)] = ConsistencyRule(ConsistencyMode(rule["mode"]), rule.get("threshold"))
    return FilterPolicy(consistency=rules, brevity_cap_words=int(data.get("brevity_cap_words", FilterPolicy().brevity_cap_words)))


def _retrieval(data: Mapping[str, Any]) -> RetrievalSettings:
    _reject_unknown(data, {"backend", "seed", "endpoint"}, "retrieval")
    endpoint = data.get("endpoint")
    if endpoint is not None:
        endpoint = _dataclass_from(EmbeddingEndpoint, endpoint, "retrieval.endpoint")
    return RetrievalSettings(
        backend=BackendKind(data.get("backend", BackendKind.LEXICAL.value)),
        seed=data.get("seed"),
        endpoint=endpoint,
    )


def _build(data: Mapping[str, Any], base_dir: Optional[str]) -> RunConfig:
    kwargs: Dict[str, Any] = {}
    written: Dict[str, str] = {}
    for key in ("name", "k", "icl_k", "beta", "max_in_flight", "lenient_parse", "max_sequence_tokens",
                "teacher_template_version"):
        if key in data:
            kwargs[key] = data[key]
    if "task" in data:
        kwargs["task"] = TaskKind.parse(data["task"])
    if "mode" in data:
        kwargs["mode"] = Mode(data["mode"])
    if "kl_estimator" in data:
        kwargs["kl_estimator"] = KLEstimator(data["kl_estimator"])
    if "generation_reward_weights" in data:
        weights = tuple(float(w) for w in data["generation_reward_weights"])
        if len(weights) != 2:
            raise ConfigError("generation_reward_weights needs exactly two values")
        kwargs["generation_reward_weights"] = weights

    kwargs["retrieval"] = _retrieval(_section(data, "retrieval"))

    sampling = _default_sampling()
    for key, value in _section(data, "sampling").items():
        sampling[_role_key(key)] = _dataclass_from(SamplingConfig, value, f"sampling.{key}")
    kwargs["sampling"] = sampling

    advantage = _dataclass_from(AdvantageConfig, _section(data, "advantage"), "advantage")
    kwargs["advantage"] = advantage
    rollout = dict(_section(data, "rollout_sampling"))
    defaults = asdict(SamplingConfig.rollout_defaults())
    defaults["n_samples"] = advantage.group_size
    kwargs["rollout_sampling"] = _dataclass_from(SamplingConfig, {**defaults, **rollout}, "rollout_sampling")

    kwargs["endpoints"] = {
        _role_key(key): _endpoint(value, f"endpoints.{key}", base_dir, written)
        for key, value in _section(data, "endpoints").items()
    }
    kwargs["curriculum"] = _dataclass_from(
        CurriculumConfig, _section(data, "curriculum"), "curriculum", unit=CurriculumUnit
    )
    kwargs["filter_policy"] = _filter_policy(_section(data, "filter_policy"))
    kwargs["split"] = _dataclass_from(SplitConfig, _section(data, "split"), "split", mode=SplitMode)
    kwargs["seeds"] = _dataclass_from(SeedsConfig, _section(data, "seeds"), "seeds")

    paths = _dataclass_from(PathsConfig, _section(data, "paths"), "paths")
    kwargs["paths"] = PathsConfig(
        dataset=_resolve(paths.dataset, base_dir, written),
        templates=_resolve(paths.templates, base_dir, written),
        output_dir=_resolve(paths.output_dir, base_dir, written),
        sft_out=_resolve(paths.sft_out, base_dir, written),
    )
    kwargs["written_paths"] = written
    return RunConfig(**kwargs)
