import math
import random

import pytest

from metrics import (
    EmptyInput,
    EmptyTrace,
    KLEstimator,
    LengthMismatch,
    LogprobTrace,
    MetricInputError,
    accuracy,
    compute_metric_report,
    kl_per_token,
    lcs_length,
    mae_rmse,
    macro_f1,
    rouge1,
    rougeL,
    shape_rewards,
    task_reward,
    tokenize,
)
from structured_output import FreeText, NoRatingFound, Rating, Tag
from task_config import TaskKind


def test_accuracy_and_macro_f1():
    preds = [Tag("comedy"), Tag("comedy"), Tag("action")]
    golds = [Tag("comedy"), Tag("action"), Tag("action")]
    assert accuracy(preds, golds) == pytest.approx(2 / 3)
    assert macro_f1(preds, golds, ("comedy", "action")) == pytest.approx(2 / 3)


def test_macro_f1_counts_absent_labels_as_zero():
    preds = [Tag("comedy")]
    golds = [Tag("comedy")]
    assert macro_f1(preds, golds, ("comedy", "action")) == pytest.approx(0.5)


def test_unparsed_prediction_is_wrong():
    assert accuracy([None, Tag("comedy")], [Tag("comedy"), Tag("comedy")]) == pytest.approx(0.5)


def test_mae_rmse():
    mae, rmse = mae_rmse([Rating(1), Rating(5), Rating(3)], [Rating(2), Rating(3), Rating(3)])
    assert mae == pytest.approx(1.0)
    assert rmse == pytest.approx(math.sqrt(5 / 3))
    assert mae_rmse([Rating(1)], [Rating(5)]) == pytest.approx((4.0, 4.0))


def test_mae_imputes_unparsed_as_three():
    assert mae_rmse([None], [Rating(5)]) == pytest.approx((2.0, 2.0))


def test_rouge_examples():
    assert rouge1("the cat sat", "the cat ran").f1 == pytest.approx(2 / 3)
    assert rougeL("the cat sat on mat", "the cat on the mat").f1 == pytest.approx(0.8)
    assert rouge1("", "anything").f1 == 0.0


def test_tokenize_lowercases_and_drops_punctuation():
    assert tokenize("Hello, World! it's_ok") == ["hello", "world", "it", "s", "ok"]


def _brute_lcs(a, b):
    best = 0
    n = len(a)
    # every subsequence of a, checked against b
    for mask in range(1 << n):
        sub = [a[i] for i in range(n) if mask >> i & 1]
        it = iter(b)
        if all(token in it for token in sub):
            best = max(best, len(sub))
    return best


def _brute_prf(overlap, n_candidate, n_reference):
    precision = overlap / n_candidate if n_candidate else 0.0
    recall = overlap / n_reference if n_reference else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _brute_unigram_overlap(a, b):
    return sum(min(a.count(token), b.count(token)) for token in set(a))


def _random_tokens(rng, vocab, max_len=12):
    return [rng.choice(vocab) for _ in range(rng.randint(0, max_len))]


def test_rouge_matches_brute_force():
    rng = random.Random(11)
    vocab = ["a", "b", "c", "d"]
    for _ in range(100):
        a, b = _random_tokens(rng, vocab), _random_tokens(rng, vocab)
        assert lcs_length(a, b) == _brute_lcs(a, b)
        text_a, text_b = " ".join(a), " ".join(b)

        expected = _brute_prf(_brute_unigram_overlap(a, b), len(a), len(b))
        score = rouge1(text_a, text_b)
        assert (score.precision, score.recall, score.f1) == pytest.approx(expected, abs=1e-9)

        expected = _brute_prf(_brute_lcs(a, b), len(a), len(b))
        score = rougeL(text_a, text_b)
        assert (score.precision, score.recall, score.f1) == pytest.approx(expected, abs=1e-9)


def test_rouge1_is_symmetric():
    rng = random.Random(12)
    vocab = ["the", "cat", "sat", "on", "mat", "dog"]
    for _ in range(200):
        a, b = " ".join(_random_tokens(rng, vocab)), " ".join(_random_tokens(rng, vocab))
        forward, backward = rouge1(a, b), rouge1(b, a)
        assert forward.f1 == pytest.approx(backward.f1, abs=1e-12)
        assert (forward.precision, forward.recall) == pytest.approx((backward.recall, backward.precision), abs=1e-12)


def test_metric_bounds_on_fuzzed_strings():
    rng = random.Random(13)
    alphabet = "ab c,.!_\n\t1Z"
    for _ in range(1000):
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        for score in (rouge1(a, b), rougeL(a, b)):
            assert 0.0 <= score.precision <= 1.0
            assert 0.0 <= score.recall <= 1.0
            assert 0.0 <= score.f1 <= 1.0
        assert 0.0 <= task_reward(TaskKind.TWEET_PARAPHRASE, FreeText(a), b) <= 1.0


def test_rating_reward_falls_with_distance():
    for gold in range(1, 6):
        by_distance = {}
        for pred in range(1, 6):
            by_distance.setdefault(abs(pred - gold), set()).add(
                task_reward(TaskKind.PRODUCT_RATING, Rating(pred), str(gold))
            )
        rewards = [by_distance[d] for d in sorted(by_distance)]
        assert all(len(r) == 1 for r in rewards)
        flat = [r.pop() for r in rewards]
        assert flat == sorted(flat, reverse=True) and len(set(flat)) == len(flat)


def test_task_reward_per_profile():
    assert task_reward(TaskKind.MOVIE_TAGGING, Tag("comedy"), "comedy") == 1.0
    assert task_reward(TaskKind.MOVIE_TAGGING, Tag("action"), "comedy") == 0.0
    assert task_reward(TaskKind.PRODUCT_RATING, Rating(5), "3") == pytest.approx(0.5)
    assert task_reward(TaskKind.PRODUCT_RATING, NoRatingFound("x"), "3") == 0.0
    assert task_reward(TaskKind.TITLE_GENERATION, FreeText("the cat sat"), "the cat sat") == pytest.approx(1.0)


def test_generation_weights_validated():
    with pytest.raises(MetricInputError):
        task_reward(TaskKind.TITLE_GENERATION, FreeText("x"), "x", weights=(0.7, 0.7))


def test_kl_estimators():
    trace = LogprobTrace.from_logprobs([-1.0, -2.0], [-1.5, -2.5])
    assert kl_per_token(trace, KLEstimator.K1) == pytest.approx([0.5, 0.5])
    assert kl_per_token(trace, KLEstimator.K3) == pytest.approx([math.exp(-0.5) + 0.5 - 1] * 2)
    assert kl_per_token(trace, KLEstimator.K3)[0] == pytest.approx(0.10653, abs=1e-5)


def test_k3_never_negative():
    rng = random.Random(3)
    for _ in range(200):
        p = [-rng.random() * 5 for _ in range(4)]
        r = [-rng.random() * 5 for _ in range(4)]
        assert min(kl_per_token(LogprobTrace.from_logprobs(p, r), KLEstimator.K3)) >= 0.0


def test_trace_validation():
    with pytest.raises(LengthMismatch):
        LogprobTrace.from_logprobs([-1.0], [-1.0, -2.0])
    with pytest.raises(MetricInputError):
        LogprobTrace.from_logprobs([0.5], [-1.0])
    with pytest.raises(EmptyTrace):
        kl_per_token(LogprobTrace(steps=()))


def test_shape_rewards_example():
    shaped = shape_rewards(0.8, [0.5, 0.5], 0.01)
    assert shaped.per_token == pytest.approx((-0.005, 0.795))


def test_shaped_sum_identity():
    rng = random.Random(17)
    for _ in range(1000):
        kl = [rng.uniform(-2, 2) for _ in range(rng.randint(1, 12))]
        beta = rng.uniform(0, 0.5)
        reward = rng.random()
        shaped = shape_rewards(reward, kl, beta)
        assert math.fsum(shaped.per_token) == pytest.approx(reward - beta * math.fsum(kl), abs=1e-12)
        assert all(v == pytest.approx(-beta * k) for v, k in zip(shaped.per_token[:-1], kl[:-1]))


def test_zero_beta_is_pure_terminal_reward():
    assert shape_rewards(0.7, [0.3, -0.2, 0.4], 0.0).per_token == (0.0, 0.0, 0.7)


def test_shape_rewards_rejects_bad_input():
    with pytest.raises(EmptyTrace):
        shape_rewards(1.0, [], 0.01)
    with pytest.raises(MetricInputError):
        shape_rewards(1.0, [0.1], -0.1)


def test_compute_metric_report_per_task():
    tagging = compute_metric_report(TaskKind.MOVIE_TAGGING, [Tag("comedy"), None], ["comedy", "action"])
    assert tagging.accuracy == pytest.approx(0.5)
    assert set(tagging.values()) == {"accuracy", "macro_f1"}

    rating = compute_metric_report(TaskKind.PRODUCT_RATING, [Rating(4), None], ["4", "5"])
    assert (rating.mae, rating.rmse) == pytest.approx((1.0, math.sqrt(2)))

    titles = compute_metric_report(TaskKind.TITLE_GENERATION, [FreeText("the cat sat"), None], ["the cat sat", "x"])
    assert titles.rouge1 == pytest.approx(0.5)
    assert titles.to_dict()["task"] == "TitleGeneration"


def test_metric_input_errors():
    with pytest.raises(LengthMismatch):
        accuracy([Tag("comedy")], [])
    with pytest.raises(EmptyInput):
        mae_rmse([], [])
