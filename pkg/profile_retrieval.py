"""Selection of personalized context from a user profile.

Three interchangeable backends rank profile entries against a retrieval query:

* ``Lexical``   - TF-IDF cosine over lowercased alphanumeric tokens (scikit-learn).
* ``Embedding`` - cosine over vectors returned by an external HTTP embedding endpoint.
* ``Random``    - seeded uniform sample without replacement, all scores 0.

Ties are broken by ``entry_id`` ascending so the ranking never depends on profile order.
"""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import requests
from sklearn.feature_extraction.text import CountVectorizer, TfidfTransformer
from sklearn.metrics.pairwise import cosine_similarity

from lamp_dataset import ProfileEntry

logger = logging.getLogger(__name__)

TOKEN_PATTERN = r"[^\W_]+"
QUERY_SEPARATOR = " "

_ANALYZER = CountVectorizer(lowercase=True, token_pattern=TOKEN_PATTERN).build_analyzer()


class RetrievalError(Exception):
    """Base class for retrieval failures."""


class EmptyQuery(RetrievalError, ValueError):
    pass


class EmptyProfile(RetrievalError, ValueError):
    pass


class BackendUnavailable(RetrievalError, RuntimeError):
    pass


class BackendKind(str, Enum):
    LEXICAL = "Lexical"
    EMBEDDING = "Embedding"
    RANDOM = "Random"


@dataclass(frozen=True)
class EmbeddingEndpoint:
    url: str
    timeout_ms: int = 30000
    api_key_env: Optional[str] = None
    model: Optional[str] = None


@dataclass(frozen=True)
class RetrievalBackend:
    kind: BackendKind = BackendKind.LEXICAL
    seed: Optional[int] = None
    endpoint: Optional[EmbeddingEndpoint] = None

    def __post_init__(self) -> None:
        if self.kind is BackendKind.RANDOM and self.seed is None:
            raise ValueError("Random retrieval backend requires an explicit seed")
        if self.kind is BackendKind.EMBEDDING and self.endpoint is None:
            raise ValueError("Embedding retrieval backend requires an endpoint")

    @classmethod
    def lexical(cls) -> "RetrievalBackend":
        return cls(BackendKind.LEXICAL)

    @classmethod
    def random(cls, seed: int) -> "RetrievalBackend":
        return cls(BackendKind.RANDOM, seed=seed)

    @classmethod
    def embedding(cls, endpoint: EmbeddingEndpoint) -> "RetrievalBackend":
        return cls(BackendKind.EMBEDDING, endpoint=endpoint)


@dataclass(frozen=True)
class RetrievalQuery:
    text: str

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise EmptyQuery("retrieval query is empty")


@dataclass(frozen=True)
class RankedContext:
    entries: Tuple[Tuple[ProfileEntry, float], ...]
    k: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def profile_entries(self) -> Tuple[ProfileEntry, ...]:
        return tuple(entry for entry, _ in self.entries)

    @property
    def scores(self) -> Tuple[float, ...]:
        return tuple(score for _, score in self.entries)

    def prefix(self, n: int) -> "RankedContext":
        return RankedContext(entries=self.entries[:n], k=n)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "entries": [{"entry_id": e.entry_id, "score": s} for e, s in self.entries],
        }


@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies of one profile.

    The vector space is the profile vocabulary widened by whatever terms the scored texts
    bring along; a term absent from the profile has df = 0 and idf = ln(1 + N) + 1.
    """

    texts: Tuple[str, ...]
    doc_freq: Dict[str, int]

    @property
    def n_documents(self) -> int:
        return len(self.texts)

    @property
    def vocabulary(self) -> Tuple[str, ...]:
        return tuple(sorted(self.doc_freq))

    def idf(self, term: str) -> float:
        return math.log((1 + self.n_documents) / (1 + self.doc_freq.get(term, 0))) + 1

    def weigh(self, texts: Sequence[str]):
        terms = set(self.doc_freq)
        for text in texts:
            terms.update(_ANALYZER(text))
        if not terms or not self.texts:
            return None
        counter = CountVectorizer(vocabulary=sorted(terms), lowercase=True, token_pattern=TOKEN_PATTERN)
        # idf(t) = ln((1 + N) / (1 + df(t))) + 1, raw counts, l2-normalized rows
        transformer = TfidfTransformer(norm="l2", smooth_idf=True, sublinear_tf=False)
        transformer.fit(counter.transform(list(self.texts)))
        return transformer.transform(counter.transform(list(texts)))


def form_query(query: str, base_response: Optional[str] = None) -> RetrievalQuery:
    if not query or not query.strip():
        raise EmptyQuery("query must be non-empty")
    if base_response is None:
        return RetrievalQuery(query)
    return RetrievalQuery(query + QUERY_SEPARATOR + base_response)


def build_corpus_stats(texts: Sequence[str]) -> CorpusStats:
    doc_freq: Counter = Counter()
    for text in texts:
        doc_freq.update(set(_ANALYZER(text)))
    return CorpusStats(texts=tuple(texts), doc_freq=dict(doc_freq))


def _clamped_cosines(matrix) -> List[float]:
    if matrix is None:
        return []
    sims = cosine_similarity(matrix[:1], matrix[1:])[0]
    return [min(1.0, max(0.0, float(value))) for value in sims]


def lexical_score(rq: RetrievalQuery, entry_text: str, corpus_stats: CorpusStats) -> float:
    scores = _clamped_cosines(corpus_stats.weigh([rq.text, entry_text]))
    return scores[0] if scores else 0.0


def _lexical_scores(profile: Sequence[ProfileEntry], rq: RetrievalQuery) -> List[float]:
    texts = [entry.text for entry in profile]
    stats = build_corpus_stats(texts)
    return _clamped_cosines(stats.weigh([rq.text] + texts)) or [0.0] * len(profile)


def _embedding_scores(profile: Sequence[ProfileEntry], rq: RetrievalQuery, endpoint: EmbeddingEndpoint) -> List[float]:
    payload = {"input": [rq.text] + [entry.text for entry in profile]}
    if endpoint.model:
        payload["model"] = endpoint.model
    headers = {}
    if endpoint.api_key_env:
        api_key = os.getenv(endpoint.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
    try:
        response = requests.post(endpoint.url, json=payload, headers=headers, timeout=endpoint.timeout_ms / 1000.0)
        response.raise_for_status()
        vectors = np.asarray(response.json()["embeddings"], dtype=float)
    except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
        raise BackendUnavailable(f"embedding endpoint {endpoint.url} failed: {exc}") from exc
    if vectors.ndim != 2 or vectors.shape[0] != len(profile) + 1:
        raise BackendUnavailable(
            f"embedding endpoint returned shape {vectors.shape}, expected ({len(profile) + 1}, d)"
        )
    sims = cosine_similarity(vectors[:1], vectors[1:])[0]
    return [float(value) for value in sims]


def _rank(profile: Sequence[ProfileEntry], scores: Sequence[float], k: int) -> RankedContext:
    order = sorted(range(len(profile)), key=lambda i: (-scores[i], profile[i].entry_id))
    chosen = order[: min(k, len(profile))]
    return RankedContext(entries=tuple((profile[i], scores[i]) for i in chosen), k=k)


def retrieve_topk(
    profile: Sequence[ProfileEntry],
    rq: RetrievalQuery,
    k: int,
    backend: Optional[RetrievalBackend] = None,
) -> RankedContext:
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not profile:
        raise EmptyProfile("cannot retrieve from an empty profile")
    backend = backend or RetrievalBackend.lexical()

    if backend.kind is BackendKind.RANDOM:
        rng = np.random.default_rng(backend.seed)
        picked = rng.choice(len(profile), size=min(k, len(profile)), replace=False)
        return RankedContext(entries=tuple((profile[int(i)], 0.0) for i in picked), k=k)

    if backend.kind is BackendKind.EMBEDDING:
        scores = _embedding_scores(profile, rq, backend.endpoint)
    else:
        scores = _lexical_scores(profile, rq)
    ranked = _rank(profile, scores, k)
    logger.debug("retrieved %d/%d entries with %s backend", len(ranked), len(profile), backend.kind.value)
    return ranked


def fixed_context(profile: Sequence[ProfileEntry], k: int) -> RankedContext:
    """First ``k`` entries in profile order, as prepended by the in-context-learning baseline."""

    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not profile:
        raise EmptyProfile("cannot build a context from an empty profile")
    return RankedContext(entries=tuple((entry, 0.0) for entry in profile[:k]), k=k)
