import json
import math
import random
import threading
import time

import pytest

from conftest import MOVIE_PROFILE, entry, make_instance, mock_providers
from data_processing import read_jsonl
from llm_utils import LogprobsUnsupported, MockProvider, Role
from rl_rollouts import (
    ACTOR_LR,
    CRITIC_LR,
    AdvantageConfig,
    CurriculumConfig,
    CurriculumUnit,
    EmptyPool,
    EmptySequence,
    GroupSizeMismatch,
    PositiveLogprob,
    RolloutSettings,
    advantages,
    batch_advantages,
    build_rollout_batch,
    build_rollouts,
    curriculum_k,
    export_rollouts,
    sample_shots,
    score_sft_target,
    sft_nll,
    trainer_sidecar,
    whiten,
)
from profile_retrieval import RankedContext
from structured_output import format_structured
from trajectory import RewriteTrajectory

CANDIDATES = (
    format_structured("The user tags light romantic plots as comedy.", "comedy"),
    format_structured("Fights dominate the plot.", "action"),
    format_structured("Same pattern as the florist story.", "comedy"),
    "drama-parse-fail",
)
CANDIDATE_LOGPROBS = ([-0.1, -0.2], [-0.3, -0.1], [-0.2, -0.2], [-1.0, -0.5])


def _providers(reference=None):
    return mock_providers({
        Role.BASE: {"*": entry("romance")},
        Role.REFLECTION: {"*": entry(*CANDIDATES, logprobs=CANDIDATE_LOGPROBS)},
        Role.REFERENCE: {"*": reference or entry(*CANDIDATES, logprobs=CANDIDATE_LOGPROBS)},
    })


def _settings(**overrides):
    values = {
        "curriculum": CurriculumConfig(k_min=2, k_max=3, e_step=1),
        "advantage": AdvantageConfig(group_size=4),
        "max_in_flight": 2,
    }
    values.update(overrides)
    return RolloutSettings(**values)


def test_curriculum_grid():
    for e_step in range(1, 11):
        cfg = CurriculumConfig(k_min=2, k_max=6, e_step=e_step)
        previous = None
        for e in range(1, 101):
            k = curriculum_k(e, cfg)
            assert k == min(6, 2 + (e - 1) // e_step)
            assert 2 <= k <= 6
            if previous is not None:
                assert k >= previous
            previous = k
        assert curriculum_k(1, cfg) == 2


def test_curriculum_validation():
    with pytest.raises(ValueError):
        curriculum_k(0, CurriculumConfig())
    with pytest.raises(ValueError):
        CurriculumConfig(k_min=4, k_max=3)
    with pytest.raises(ValueError):
        CurriculumConfig(e_step=0)


def test_single_epoch_schedule_spans_steps():
    cfg = CurriculumConfig.for_single_epoch(total_steps=50)
    assert cfg.unit is CurriculumUnit.STEP
    assert cfg.e_step == 10
    assert curriculum_k(50, cfg) == 6
    assert curriculum_k(10, cfg) == 2 and curriculum_k(11, cfg) == 3


def test_advantages_example():
    assert advantages([0.8, 0.2, 0.5, 0.5], AdvantageConfig(group_size=4)) == pytest.approx([0.3, -0.3, 0.0, 0.0])
    with pytest.raises(GroupSizeMismatch):
        advantages([1.0, 0.0], AdvantageConfig(group_size=4))


def test_advantages_are_translation_invariant_and_scale_linearly():
    rng = random.Random(8)
    cfg = AdvantageConfig(group_size=6)
    for _ in range(1000):
        rewards = [rng.random() for _ in range(6)]
        shift, scale = rng.uniform(-5, 5), rng.uniform(0.1, 4)
        base = advantages(rewards, cfg)
        assert sum(base) == pytest.approx(0.0, abs=1e-12)
        assert advantages([r + shift for r in rewards], cfg) == pytest.approx(base, abs=1e-9)
        assert advantages([r * scale for r in rewards], cfg) == pytest.approx([a * scale for a in base], abs=1e-9)


def test_batch_whitening():
    cfg = AdvantageConfig(group_size=2)
    groups = batch_advantages([[1.0, 0.0], [0.5, 0.5]], cfg)
    flat = [a for group in groups for a in group]
    assert sum(flat) == pytest.approx(0.0, abs=1e-9)
    assert flat == pytest.approx(whiten([0.5, -0.5, 0.0, 0.0]))
    raw = batch_advantages([[1.0, 0.0]], AdvantageConfig(group_size=2, whiten_batch=False))
    assert raw == [[0.5, -0.5]]


def test_sft_nll():
    result = sft_nll([-0.1, -0.2, -0.3])
    assert result.total_nll == pytest.approx(0.6)
    assert result.T == 3
    assert sft_nll([0.0, 0.0]).total_nll == 0.0
    with pytest.raises(EmptySequence):
        sft_nll([])
    with pytest.raises(PositiveLogprob):
        sft_nll([-0.1, 0.2])


def test_sft_nll_matches_negated_sum():
    rng = random.Random(21)
    for _ in range(100):
        trace = [-rng.expovariate(1.0) for _ in range(rng.randint(1, 50))]
        assert sft_nll(trace).total_nll == pytest.approx(-math.fsum(trace), abs=1e-12)


def test_sample_shots_prefix():
    pool = RankedContext(entries=tuple((e, 1.0) for e in MOVIE_PROFILE), k=3)
    assert sample_shots(pool, 2) == list(MOVIE_PROFILE[:2])
    assert sample_shots(pool, 10) == list(MOVIE_PROFILE)
    with pytest.raises(EmptyPool):
        sample_shots(RankedContext(entries=(), k=1), 1)


def test_worked_rollout_group():
    records = build_rollouts(make_instance(), 1, _settings(), _providers())
    assert [r.task_reward for r in records] == [1.0, 0.0, 1.0, 0.0]
    assert [r.group_advantage for r in records] == pytest.approx([0.5, -0.5, 0.5, -0.5])
    assert all(r.k == 2 and r.shot_count == 2 for r in records)
    assert {r.group_id for r in records} == {"i1:e1"}
    # identical policy and reference traces give zero KL
    assert all(kl == 0.0 for r in records for kl in r.shaped.kl)
    assert records[0].shaped.per_token == pytest.approx((0.0, 1.0))
    assert "Initial response: romance" in records[0].prompt_text


def test_curriculum_grows_the_context():
    records = build_rollouts(make_instance(), 5, _settings(), _providers())
    assert records[0].k == 3 and records[0].shot_count == 3


def test_unscorable_candidate_keeps_its_slot():
    reference = entry(*CANDIDATES[:3], logprobs=CANDIDATE_LOGPROBS[:3])
    records = build_rollouts(make_instance(), 1, _settings(), _providers(reference))
    assert len(records) == 4
    assert records[3].trace is None
    assert LogprobsUnsupported.__name__ in records[3].error
    assert records[3].task_reward == 0.0
    assert records[3].policy_logprobs == (-1.0, -0.5)
    assert records[3].to_dict()["ref_logprobs"] is None


def test_reference_length_mismatch_keeps_policy_trace(tmp_path):
    longer = ([-0.1, -0.2, -0.3],) + CANDIDATE_LOGPROBS[1:]
    records = build_rollouts(make_instance(), 1, _settings(), _providers(entry(*CANDIDATES, logprobs=longer)))
    assert records[0].trace is None
    assert records[0].error.startswith("LengthMismatch")
    path = str(tmp_path / "rollouts.jsonl")
    export_rollouts(records, path)
    row = read_jsonl(path)[0]
    assert row["policy_logprobs"] == [-0.1, -0.2]
    assert row["ref_logprobs"] is None
    assert read_jsonl(path)[1]["ref_logprobs"] == [-0.3, -0.1]


class _CountingReference(MockProvider):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.lock = threading.Lock()
        self.active = 0
        self.peak = 0

    def score_logprobs(self, prompt, completion):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        try:
            time.sleep(0.01)
            return super().score_logprobs(prompt, completion)
        finally:
            with self.lock:
                self.active -= 1


def test_batch_keeps_reference_calls_within_bound():
    providers = _providers()
    reference = _CountingReference(
        {(Role.REFERENCE, "*"): entry(*CANDIDATES, logprobs=CANDIDATE_LOGPROBS)}, Role.REFERENCE
    )
    providers.providers[Role.REFERENCE] = reference
    instances = [make_instance(instance_id=f"i{n}", user_id=f"u{n}") for n in range(4)]
    records, failures = build_rollout_batch(instances, 1, _settings(), providers)
    assert not failures and len(records) == 16
    assert 1 <= reference.peak <= 2


def test_batch_whitens_across_groups_and_collects_failures():
    instances = [
        make_instance(instance_id="a"),
        make_instance(instance_id="b", user_id="u2"),
        make_instance(instance_id="empty", user_id="u3", profile=()),
    ]
    records, failures = build_rollout_batch(instances, 1, _settings(), _providers())
    assert len(records) == 8
    assert [iid for iid, _ in failures] == ["empty"]
    assert all(r.whitened for r in records)
    assert sum(r.advantage for r in records) == pytest.approx(0.0, abs=1e-9)
    assert [r.advantage for r in records[:4]] == pytest.approx([1.0, -1.0, 1.0, -1.0], abs=1e-6)


def test_export_rollouts_and_sidecar(tmp_path):
    records = build_rollouts(make_instance(), 1, _settings(), _providers())
    path = str(tmp_path / "rollouts.jsonl")
    assert export_rollouts(records, path) == 4
    rows = read_jsonl(path)
    assert rows[0]["candidate"] == CANDIDATES[0]
    assert rows[0]["policy_logprobs"] == [-0.1, -0.2]
    assert set(rows[0]) >= {"prompt", "k", "kl", "per_token_rewards", "task_reward", "advantage", "group_id", "seed"}
    json.dumps(rows)

    sidecar = trainer_sidecar(_settings())
    assert sidecar["actor_lr"] == ACTOR_LR and sidecar["critic_lr"] == CRITIC_LR
    assert sidecar["group_size"] == 4
    assert sidecar["kl_estimator"] == "K1"
    assert sidecar["sampling"] == {"temperature": 1.0, "top_p": 0.9, "n": 4}


def test_score_sft_target():
    target = format_structured("short reason", "comedy")
    providers = mock_providers({Role.REFLECTION: {"*": entry(target, logprobs=[[-0.25, -0.5, -0.25]])}})
    record = RewriteTrajectory(
        instance_id="i1",
        task=make_instance().kind,
        query="Which tag?",
        base_response="romance",
        p_star=MOVIE_PROFILE[0],
        think="short reason",
        personalized="comedy",
        gold="comedy",
    )
    result = score_sft_target(record, providers)
    assert result.total_nll == pytest.approx(1.0)
    assert result.T == 3
