"""Black-box completion providers: OpenAI-compatible endpoints with resilient fallbacks and a scripted mock."""

from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

import openai
from openai import OpenAI
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt, wait_random_exponential

from data_processing import iter_jsonl

logger = logging.getLogger(__name__)

API_KEY_ENV_PREFIX = "RPO_API_KEY_"
PLACEHOLDER_API_KEY = "EMPTY"
WILDCARD_HASH = "*"
DEFAULT_MAX_RETRIES = 5

T = TypeVar("T")
R = TypeVar("R")


class ProviderError(RuntimeError):
    """Base class for completion and scoring failures."""


class ProviderTimeout(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class MalformedResponse(ProviderError):
    pass


class LogprobsUnsupported(ProviderError):
    pass


class ProviderHTTPError(ProviderError):
    def __init__(self, message: str, status_code: Optional[int] = None):
        super().__init__(message)
        self.status_code = status_code


class Role(str, Enum):
    BASE = "BaseModel"
    REFLECTION = "ReflectionModel"
    TEACHER = "TeacherModel"
    REFERENCE = "ReferenceModel"

    @classmethod
    def parse(cls, text: "str | Role") -> "Role":
        if isinstance(text, Role):
            return text
        needle = str(text or "").strip().lower()
        for role in cls:
            if needle in (role.value.lower(), role.name.lower()):
                return role
        raise ValueError(f"unknown role: {text!r}")

    @property
    def env_var(self) -> str:
        return API_KEY_ENV_PREFIX + self.name


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.0
    top_p: float = 1.0
    n_samples: int = 1
    max_new_tokens: int = 512

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")

    @classmethod
    def rollout_defaults(cls) -> "SamplingConfig":
        return cls(temperature=1.0, top_p=0.9, n_samples=16)


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    want_logprobs: bool = False
    role_tag: Role = Role.REFLECTION

    def __post_init__(self) -> None:
        if self.role_tag is Role.BASE and self.want_logprobs:
            raise LogprobsUnsupported("the base model is a black box; log-probs cannot be requested from it")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


TokenTrace = Tuple[Tuple[str, float], ...]


@dataclass(frozen=True)
class CompletionResult:
    texts: Tuple[str, ...]
    logprob_traces: Optional[Tuple[TokenTrace, ...]] = None
    usage: Usage = field(default_factory=Usage)
    latency_ms: float = 0.0
    model_used: str = ""
    failures: Tuple[Tuple[str, str], ...] = ()


@dataclass(frozen=True)
class EndpointConfig:
    kind: str = "openai"
    url: Optional[str] = None
    model: str = ""
    timeout_ms: int = 60000
    max_retries: int = DEFAULT_MAX_RETRIES
    backoff_base_s: float = 1.0
    backoff_max_s: float = 30.0
    api_key_env: Optional[str] = None
    fallback_models: Tuple[str, ...] = ()
    script: Optional[str] = None
    supports_logprobs: bool = True


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _should_try_fallback(error_message: str) -> bool:
    lowered = (error_message or "").lower()
    if "empty_response_text" in lowered:
        return True
    keywords = ["model_not_found", "unsupported_parameter", "does not exist", "no access", "permission"]
    return ("model" in lowered and "not" in lowered) or any(keyword in lowered for keyword in keywords)


def _format_fallback_notice(primary_model: str, result: CompletionResult) -> str:
    failure_reason = result.failures[0][1] if result.failures else "unknown error"
    return f"primary model {primary_model} failed ({failure_reason}); used {result.model_used} instead"


def _map_openai_error(exc: Exception) -> ProviderError:
    if isinstance(exc, openai.RateLimitError):
        return RateLimited(f"rate limited: {exc}")
    if isinstance(exc, (openai.APITimeoutError, openai.APIConnectionError)):
        return ProviderTimeout(f"endpoint unreachable or timed out: {exc}")
    if isinstance(exc, openai.APIStatusError):
        return ProviderHTTPError(f"HTTP {exc.status_code}: {exc}", status_code=exc.status_code)
    return MalformedResponse(f"unexpected provider failure: {exc}")


class OpenAICompatibleProvider:
    """Chat-completions client for one role; rate limits are retried, missing models fall back."""

    def __init__(self, config: EndpointConfig, role: Role, api_key: Optional[str] = None, client: Optional[OpenAI] = None):
        self.config = config
        self.role = role
        if client is None:
            client = OpenAI(
                api_key=api_key or PLACEHOLDER_API_KEY,
                base_url=config.url,
                timeout=config.timeout_ms / 1000.0,
                max_retries=0,
            )
        self.client = client

    @property
    def model_name(self) -> str:
        return self.config.model

    def _retrying(self) -> Retrying:
        return Retrying(
            retry=retry_if_exception_type(RateLimited),
            wait=wait_random_exponential(multiplier=self.config.backoff_base_s, max=self.config.backoff_max_s),
            stop=stop_after_attempt(self.config.max_retries + 1),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )

    def _models_to_try(self) -> List[str]:
        models = [self.config.model]
        for candidate in self.config.fallback_models:
            if candidate and candidate.lower() not in {m.lower() for m in models}:
                models.append(candidate)
        return models

    def complete(self, req: CompletionRequest) -> CompletionResult:
        if req.want_logprobs and not self.config.supports_logprobs:
            raise LogprobsUnsupported(f"{self.role.value} endpoint is configured without log-prob support")
        result = self._retrying()(self._complete_with_fallback, req)
        if result.failures:
            logger.warning(_format_fallback_notice(self.config.model, result))
        return result

    def _complete_with_fallback(self, req: CompletionRequest) -> CompletionResult:
        tried_failures: List[Tuple[str, str]] = []
        models = self._models_to_try()
        for idx, model_name in enumerate(models):
            try:
                result = self._call_single_model(model_name, req)
            except ProviderHTTPError as exc:
                tried_failures.append((model_name, str(exc)))
                is_last_candidate = idx == len(models) - 1
                if is_last_candidate or not _should_try_fallback(str(exc)):
                    aggregated = "; ".join(f"{model} failed: {msg}" for model, msg in tried_failures)
                    raise ProviderHTTPError(aggregated, status_code=exc.status_code) from exc
                continue
            return CompletionResult(
                texts=result.texts,
                logprob_traces=result.logprob_traces,
                usage=result.usage,
                latency_ms=result.latency_ms,
                model_used=model_name,
                failures=tuple(tried_failures),
            )
        raise ProviderError("no models were attempted for the request")

    def _call_single_model(self, model_name: str, req: CompletionRequest) -> CompletionResult:
        kwargs = {
            "model": model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.sampling.temperature,
            "top_p": req.sampling.top_p,
            "n": req.sampling.n_samples,
            "max_tokens": req.sampling.max_new_tokens,
        }
        if req.want_logprobs:
            kwargs["logprobs"] = True
        started = time.perf_counter()
        try:
            completion = self.client.chat.completions.create(**kwargs)
        except openai.OpenAIError as exc:
            raise _map_openai_error(exc) from exc
        latency_ms = (time.perf_counter() - started) * 1000.0

        choices = sorted(getattr(completion, "choices", None) or [], key=lambda c: c.index)
        if len(choices) != req.sampling.n_samples:
            raise MalformedResponse(f"expected {req.sampling.n_samples} choices, got {len(choices)}")
        texts = []
        traces = []
        for choice in choices:
            message = getattr(choice, "message", None)
            content = getattr(message, "content", None)
            if content is None:
                raise MalformedResponse("choice without message content")
            texts.append(content.strip())
            if req.want_logprobs:
                logprobs = getattr(choice, "logprobs", None)
                tokens = getattr(logprobs, "content", None) if logprobs is not None else None
                if tokens is None:
                    raise LogprobsUnsupported(f"{model_name} returned no log-probs")
                traces.append(tuple((tok.token, float(tok.logprob)) for tok in tokens))

        usage = getattr(completion, "usage", None)
        return CompletionResult(
            texts=tuple(texts),
            logprob_traces=tuple(traces) if req.want_logprobs else None,
            usage=Usage(
                prompt_tokens=int(getattr(usage, "prompt_tokens", 0) or 0),
                completion_tokens=int(getattr(usage, "completion_tokens", 0) or 0),
            ),
            latency_ms=latency_ms,
            model_used=model_name,
        )

    def score_logprobs(self, prompt: str, completion: str) -> List[float]:
        """Teacher-forced log-probs of ``completion`` given ``prompt`` via the echo completions route."""

        if self.role is Role.BASE:
            raise LogprobsUnsupported("the base model is a black box; it cannot score text")
        if not completion:
            return []
        if not self.config.supports_logprobs:
            raise LogprobsUnsupported(f"{self.role.value} endpoint is configured without log-prob support")
        return self._retrying()(self._score_once, prompt, completion)

    def _score_once(self, prompt: str, completion: str) -> List[float]:
        try:
            response = self.client.completions.create(
                model=self.config.model,
                prompt=prompt + completion,
                echo=True,
                logprobs=0,
                max_tokens=1,
                temperature=0.0,
            )
        except openai.BadRequestError as exc:
            raise LogprobsUnsupported(f"teacher-forced scoring rejected: {exc}") from exc
        except openai.OpenAIError as exc:
            raise _map_openai_error(exc) from exc

        choices = getattr(response, "choices", None) or []
        logprobs = getattr(choices[0], "logprobs", None) if choices else None
        if logprobs is None or logprobs.text_offset is None or logprobs.token_logprobs is None:
            raise LogprobsUnsupported("endpoint did not echo prompt log-probs")
        start, end = len(prompt), len(prompt) + len(completion)
        values = []
        for offset, value in zip(logprobs.text_offset, logprobs.token_logprobs):
            if start <= offset < end:
                if value is None:
                    raise MalformedResponse(f"missing log-prob at offset {offset}")
                values.append(float(value))
        if not values:
            raise MalformedResponse("no completion tokens found in echoed log-probs")
        return values


@dataclass(frozen=True)
class MockEntry:
    texts: Tuple[str, ...]
    logprobs: Optional[Tuple[Tuple[float, ...], ...]] = None


def load_mock_script(path: str) -> Dict[Tuple[Role, str], MockEntry]:
    """Read ``{"role", "prompt_hash", "texts", "logprobs"?}`` lines; ``"*"`` is a per-role default."""

    entries: Dict[Tuple[Role, str], MockEntry] = {}
    try:
        rows = list(iter_jsonl(path))
    except (OSError, ValueError) as exc:
        raise ProviderError(f"cannot read mock script {path}: {exc}") from exc
    for line_no, row in rows:
        try:
            role = Role.parse(row["role"])
            key = str(row["prompt_hash"])
            texts = tuple(str(text) for text in row["texts"])
            raw_logprobs = row.get("logprobs")
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"{path} line {line_no}: malformed mock entry ({exc})") from exc
        if not texts:
            raise ProviderError(f"{path} line {line_no}: texts must be non-empty")
        logprobs = None
        if raw_logprobs is not None:
            if len(raw_logprobs) != len(texts):
                raise ProviderError(f"{path} line {line_no}: logprobs must align with texts")
            logprobs = tuple(tuple(float(v) for v in trace) for trace in raw_logprobs)
        entries[(role, key)] = MockEntry(texts=texts, logprobs=logprobs)
    logger.debug("loaded %d mock entries from %s", len(entries), path)
    return entries


class MockProvider:
    """Deterministic scripted responses keyed by (role, prompt hash)."""

    def __init__(self, entries: Mapping[Tuple[Role, str], MockEntry], role: Role, model: str = "mock"):
        self.entries = dict(entries)
        self.role = role
        self.model = model

    @classmethod
    def from_script(cls, path: str, role: Role, model: str = "mock") -> "MockProvider":
        return cls(load_mock_script(path), role, model=model or "mock")

    @property
    def model_name(self) -> str:
        return self.model

    def _lookup(self, prompt: str) -> MockEntry:
        digest = prompt_hash(prompt)
        entry = self.entries.get((self.role, digest)) or self.entries.get((self.role, WILDCARD_HASH))
        if entry is None:
            raise MalformedResponse(f"no scripted {self.role.value} response for prompt hash {digest}")
        return entry

    def complete(self, req: CompletionRequest) -> CompletionResult:
        entry = self._lookup(req.prompt)
        n = req.sampling.n_samples
        picks = [i % len(entry.texts) for i in range(n)]
        texts = tuple(entry.texts[i] for i in picks)
        traces = None
        if req.want_logprobs:
            if entry.logprobs is None:
                raise LogprobsUnsupported(f"mock {self.role.value} entry has no scripted log-probs")
            traces = tuple(_mock_trace(entry.texts[i], entry.logprobs[i]) for i in picks)
        return CompletionResult(
            texts=texts,
            logprob_traces=traces,
            usage=Usage(
                prompt_tokens=len(req.prompt.split()),
                completion_tokens=sum(len(text.split()) for text in texts),
            ),
            latency_ms=0.0,
            model_used=self.model,
        )

    def score_logprobs(self, prompt: str, completion: str) -> List[float]:
        if self.role is Role.BASE:
            raise LogprobsUnsupported("the base model is a black box; it cannot score text")
        if not completion:
            return []
        entry = self._lookup(prompt)
        if entry.logprobs is None or completion not in entry.texts:
            raise LogprobsUnsupported(f"mock {self.role.value} cannot score this completion")
        return list(entry.logprobs[entry.texts.index(completion)])


def _mock_trace(text: str, logprobs: Sequence[float]) -> TokenTrace:
    words = text.split()
    tokens = words if len(words) == len(logprobs) else [""] * len(logprobs)
    return tuple(zip(tokens, (float(v) for v in logprobs)))


Provider = Union[OpenAICompatibleProvider, MockProvider]


def resolve_api_key(role: Role, endpoint: EndpointConfig) -> Optional[str]:
    if endpoint.api_key_env:
        return os.getenv(endpoint.api_key_env)
    return os.getenv(role.env_var)


def build_provider(endpoint: EndpointConfig, role: Role) -> Provider:
    if endpoint.kind == "mock":
        if not endpoint.script:
            raise ProviderError(f"mock endpoint for {role.value} needs a script path")
        return MockProvider.from_script(endpoint.script, role, model=endpoint.model or "mock")
    if endpoint.kind == "openai":
        api_key = resolve_api_key(role, endpoint)
        if not api_key:
            logger.warning("no API key found for %s (set %s); sending a placeholder key", role.value, role.env_var)
        return OpenAICompatibleProvider(endpoint, role, api_key=api_key)
    raise ProviderError(f"unknown endpoint kind {endpoint.kind!r}")


def map_bounded(fn: Callable[[T], R], items: Sequence[T], max_in_flight: int) -> List[Union[R, Exception]]:
    """Apply ``fn`` with at most ``max_in_flight`` calls outstanding; results keep input order."""

    if max_in_flight < 1:
        raise ValueError(f"max_in_flight must be >= 1, got {max_in_flight}")
    items = list(items)
    if not items:
        return []
    results: List[Union[R, Exception]] = []
    with ThreadPoolExecutor(max_workers=min(max_in_flight, len(items))) as pool:
        futures = [pool.submit(fn, item) for item in items]
        for future in futures:
            try:
                results.append(future.result())
            except Exception as exc:  # pylint: disable=broad-except
                results.append(exc)
    return results


class ProviderSet:
    """Routes each request to the provider configured for its role."""

    def __init__(self, providers: Mapping[Role, Provider]):
        self.providers = dict(providers)

    def has(self, role: Role) -> bool:
        return role in self.providers

    def get(self, role: Role) -> Provider:
        try:
            return self.providers[role]
        except KeyError:
            raise ProviderError(f"no endpoint configured for {role.value}") from None

    def complete(self, req: CompletionRequest) -> CompletionResult:
        return self.get(req.role_tag).complete(req)

    def complete_batch(self, reqs: Sequence[CompletionRequest], max_in_flight: int) -> List[Union[CompletionResult, Exception]]:
        return map_bounded(self.complete, reqs, max_in_flight)

    def score_logprobs(self, prompt: str, completion: str, role: Role) -> List[float]:
        if role is Role.BASE:
            raise LogprobsUnsupported("the base model is a black box; it cannot score text")
        return self.get(role).score_logprobs(prompt, completion)

    def score_batch(
        self, pairs: Sequence[Tuple[str, str]], role: Role, max_in_flight: int
    ) -> List[Union[List[float], Exception]]:
        return map_bounded(lambda pair: self.score_logprobs(pair[0], pair[1], role), pairs, max_in_flight)

    def models(self) -> Dict[str, str]:
        return {role.value: provider.model_name for role, provider in self.providers.items()}


def build_providers(endpoints: Mapping[Role, EndpointConfig]) -> ProviderSet:
    return ProviderSet({role: build_provider(endpoint, role) for role, endpoint in endpoints.items()})


def complete(req: CompletionRequest, endpoint: Union[EndpointConfig, Provider, ProviderSet]) -> CompletionResult:
    if isinstance(endpoint, EndpointConfig):
        endpoint = build_provider(endpoint, req.role_tag)
    return endpoint.complete(req)


def complete_batch(
    reqs: Sequence[CompletionRequest],
    providers: ProviderSet,
    max_in_flight: int,
) -> List[Union[CompletionResult, Exception]]:
    return providers.complete_batch(reqs, max_in_flight)


def score_logprobs(prompt: str, completion: str, role_tag: Role, providers: ProviderSet) -> List[float]:
    return providers.score_logprobs(prompt, completion, role_tag)


def first_text(result: CompletionResult) -> str:
    return result.texts[0] if result.texts else ""


def provider_models(providers: ProviderSet, roles: Iterable[Role]) -> Dict[str, str]:
    return {role.value: providers.get(role).model_name for role in roles if providers.has(role)}
