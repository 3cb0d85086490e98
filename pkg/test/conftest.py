import json
import os
import sys

import pytest

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from lamp_dataset import ProfileEntry, TaskInstance  # noqa: E402
from llm_utils import MockEntry, MockProvider, ProviderSet, Role  # noqa: E402
from task_config import TaskKind  # noqa: E402

MOVIE_PROFILE = (
    ProfileEntry("p1", "Two rival chefs open restaurants on the same street and sabotage each other.", "comedy"),
    ProfileEntry("p2", "A lonely astronaut grows potatoes on Mars while waiting for rescue.", "sci-fi"),
    ProfileEntry("p3", "A shy florist and a grumpy baker fall in love during a town festival.", "comedy"),
)


def make_instance(
    instance_id="i1",
    user_id="u1",
    kind=TaskKind.MOVIE_TAGGING,
    query="A wedding singer falls for a waitress who is about to marry the wrong man.",
    gold="comedy",
    profile=MOVIE_PROFILE,
    timestamp=None,
):
    return TaskInstance(
        instance_id=instance_id,
        user_id=user_id,
        kind=kind,
        query=query,
        gold=gold,
        profile=tuple(profile),
        timestamp=timestamp,
    )


def mock_providers(scripts):
    """``scripts`` maps a role to ``{prompt_hash_or_*: MockEntry}``."""

    providers = {}
    for role, entries in scripts.items():
        providers[role] = MockProvider({(role, key): entry for key, entry in entries.items()}, role, model=f"mock-{role.name.lower()}")
    return ProviderSet(providers)


def entry(*texts, logprobs=None):
    return MockEntry(texts=tuple(texts), logprobs=tuple(tuple(t) for t in logprobs) if logprobs else None)


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    return str(path)


@pytest.fixture
def instance():
    return make_instance()


@pytest.fixture
def movie_dataset_path(tmp_path):
    rows = []
    for n in range(6):
        inst = make_instance(instance_id=f"i{n}", user_id=f"u{n % 3}", timestamp=n)
        rows.append(inst.to_dict())
    return write_jsonl(tmp_path / "movies.jsonl", rows)
