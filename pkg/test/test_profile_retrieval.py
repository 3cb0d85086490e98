import json
import math
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from lamp_dataset import ProfileEntry
from profile_retrieval import (
    BackendKind,
    BackendUnavailable,
    EmbeddingEndpoint,
    EmptyProfile,
    EmptyQuery,
    RetrievalBackend,
    RetrievalQuery,
    build_corpus_stats,
    fixed_context,
    form_query,
    lexical_score,
    retrieve_topk,
)

PROFILE = (
    ProfileEntry("e1", "red apple pie"),
    ProfileEntry("e2", "blue sky"),
    ProfileEntry("e3", "apple tart"),
)

IDF_APPLE = math.log(4 / 3) + 1
IDF_SINGLE = math.log(2) + 1
IDF_UNSEEN = math.log(4) + 1


def test_form_query_joins_with_single_space():
    assert form_query("tag this movie", "comedy").text == "tag this movie comedy"
    assert form_query("q").text == "q"
    with pytest.raises(EmptyQuery):
        form_query("", "x")


def test_lexical_top2_are_the_apple_entries():
    ranked = retrieve_topk(PROFILE, RetrievalQuery("apple dessert"), 2)
    assert [entry.entry_id for entry in ranked.profile_entries] == ["e3", "e1"]
    assert ranked.k == 2


def test_lexical_scores_match_hand_computed_tfidf():
    stats = build_corpus_stats([entry.text for entry in PROFILE])
    query = RetrievalQuery("apple dessert")
    # "dessert" never occurs in the profile: df = 0
    query_norm = math.sqrt(IDF_APPLE ** 2 + IDF_UNSEEN ** 2)
    tart = IDF_APPLE ** 2 / (query_norm * math.sqrt(IDF_APPLE ** 2 + IDF_SINGLE ** 2))
    pie = IDF_APPLE ** 2 / (query_norm * math.sqrt(IDF_APPLE ** 2 + 2 * IDF_SINGLE ** 2))
    assert lexical_score(query, "apple tart", stats) == pytest.approx(tart, abs=1e-9)
    assert lexical_score(query, "apple tart", stats) == pytest.approx(0.28747, abs=1e-5)
    assert lexical_score(query, "red apple pie", stats) == pytest.approx(pie, abs=1e-9)
    assert lexical_score(query, "blue sky", stats) == 0.0


def test_unseen_query_terms_get_full_idf():
    stats = build_corpus_stats([entry.text for entry in PROFILE])
    assert stats.idf("dessert") == pytest.approx(IDF_UNSEEN)
    assert stats.idf("apple") == pytest.approx(IDF_APPLE)
    assert "dessert" not in stats.vocabulary
    ranked = retrieve_topk(PROFILE, RetrievalQuery("apple dessert"), 3)
    assert ranked.scores[0] == pytest.approx(lexical_score(RetrievalQuery("apple dessert"), "apple tart", stats))


def test_identical_text_scores_one():
    stats = build_corpus_stats([entry.text for entry in PROFILE])
    assert lexical_score(RetrievalQuery("red apple pie"), "red apple pie", stats) == pytest.approx(1.0, abs=1e-12)


def test_k_larger_than_profile_returns_everything():
    ranked = retrieve_topk(PROFILE, RetrievalQuery("apple"), 10)
    assert sorted(entry.entry_id for entry in ranked.profile_entries) == ["e1", "e2", "e3"]
    assert list(ranked.scores) == sorted(ranked.scores, reverse=True)


def test_ranking_is_order_independent():
    rng = random.Random(5)
    profile = [ProfileEntry(f"e{n}", text) for n, text in enumerate(
        ["apple pie", "apple tart", "pear tart", "sky", "blue apple", "green pear pie"]
    )]
    expected = retrieve_topk(profile, RetrievalQuery("apple tart pie"), 3)
    for _ in range(20):
        shuffled = profile[:]
        rng.shuffle(shuffled)
        assert retrieve_topk(shuffled, RetrievalQuery("apple tart pie"), 3).entries == expected.entries


def test_ties_break_by_entry_id():
    profile = [ProfileEntry("b", "same words"), ProfileEntry("a", "same words")]
    ranked = retrieve_topk(profile, RetrievalQuery("same"), 2)
    assert [entry.entry_id for entry in ranked.profile_entries] == ["a", "b"]


def test_random_backend_is_seeded():
    backend = RetrievalBackend.random(seed=1)
    first = retrieve_topk(PROFILE, RetrievalQuery("x"), 2, backend)
    second = retrieve_topk(PROFILE, RetrievalQuery("x"), 2, backend)
    assert first == second
    assert set(first.scores) == {0.0}
    assert len({entry.entry_id for entry in first.profile_entries}) == 2


def test_random_backend_requires_seed():
    with pytest.raises(ValueError):
        RetrievalBackend(kind=BackendKind.RANDOM)


def test_empty_profile():
    with pytest.raises(EmptyProfile):
        retrieve_topk((), RetrievalQuery("x"), 1)


def test_fixed_context_keeps_profile_order():
    context = fixed_context(PROFILE, 2)
    assert [entry.entry_id for entry in context.profile_entries] == ["e1", "e2"]


class _EmbeddingHandler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        # one-hot on whether the text mentions "apple"
        vectors = [[1.0, 0.0] if "apple" in text else [0.0, 1.0] for text in body["input"]]
        payload = json.dumps({"embeddings": vectors}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def embedding_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _EmbeddingHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/embed"
    server.shutdown()
    server.server_close()


def test_embedding_backend_ranks_by_cosine(embedding_server):
    backend = RetrievalBackend.embedding(EmbeddingEndpoint(url=embedding_server, timeout_ms=5000))
    ranked = retrieve_topk(PROFILE, RetrievalQuery("apple please"), 2, backend)
    assert [entry.entry_id for entry in ranked.profile_entries] == ["e1", "e3"]
    assert ranked.scores == pytest.approx((1.0, 1.0))


def test_embedding_backend_unreachable():
    backend = RetrievalBackend.embedding(EmbeddingEndpoint(url="http://127.0.0.1:9/embed", timeout_ms=500))
    with pytest.raises(BackendUnavailable):
        retrieve_topk(PROFILE, RetrievalQuery("apple"), 1, backend)
