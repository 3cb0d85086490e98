import json

import pytest

from conftest import make_instance, write_jsonl
from lamp_dataset import (
    DatasetIOError,
    EmptyUserHistory,
    InsufficientUsers,
    InvalidSplitFraction,
    LabelError,
    ProfileEntry,
    SchemaError,
    SplitMode,
    dump_dataset,
    load_dataset,
    split_time,
    split_users,
)
from task_config import TaskKind


def _record(**overrides):
    row = {
        "instance_id": "i1",
        "user_id": "u1",
        "kind": "MovieTagging",
        "query": "A heist goes wrong.",
        "gold": "comedy",
        "profile": [{"entry_id": "p1", "text": "A clown robs a bank.", "label": "comedy"}],
    }
    row.update(overrides)
    return row


def test_load_single_valid_line(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [_record()])
    instances = load_dataset(path, TaskKind.MOVIE_TAGGING)
    assert len(instances) == 1
    assert instances[0].gold == "comedy"
    assert instances[0].profile[0] == ProfileEntry("p1", "A clown robs a bank.", "comedy")


def test_missing_gold_reports_line(tmp_path):
    row = _record()
    del row["gold"]
    path = write_jsonl(tmp_path / "d.jsonl", [row])
    with pytest.raises(SchemaError) as info:
        load_dataset(path, TaskKind.MOVIE_TAGGING)
    assert info.value.line_no == 1


def test_rating_outside_scale_is_a_label_error(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [_record(kind="ProductRating", gold="7", profile=[])])
    with pytest.raises(LabelError):
        load_dataset(path, TaskKind.PRODUCT_RATING)


def test_bad_json_on_second_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(_record()) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(SchemaError) as info:
        load_dataset(str(path), TaskKind.MOVIE_TAGGING)
    assert info.value.line_no == 2


def test_duplicate_entry_ids_rejected(tmp_path):
    profile = [{"entry_id": "p1", "text": "a"}, {"entry_id": "p1", "text": "b"}]
    path = write_jsonl(tmp_path / "d.jsonl", [_record(profile=profile)])
    with pytest.raises(SchemaError):
        load_dataset(path, TaskKind.MOVIE_TAGGING)


def test_profile_label_outside_tag_set(tmp_path):
    profile = [{"entry_id": "p1", "text": "a", "label": "musical"}]
    path = write_jsonl(tmp_path / "d.jsonl", [_record(profile=profile)])
    with pytest.raises(LabelError):
        load_dataset(path, TaskKind.MOVIE_TAGGING)


def test_kind_mismatch(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [_record()])
    with pytest.raises(SchemaError):
        load_dataset(path, TaskKind.TITLE_GENERATION)


def test_missing_file():
    with pytest.raises(DatasetIOError):
        load_dataset("/nonexistent/data.jsonl", TaskKind.MOVIE_TAGGING)


def test_dump_then_load_round_trip(tmp_path, movie_dataset_path):
    instances = load_dataset(movie_dataset_path, TaskKind.MOVIE_TAGGING)
    out = str(tmp_path / "copy.jsonl")
    assert dump_dataset(instances, out) == len(instances)
    assert load_dataset(out, TaskKind.MOVIE_TAGGING) == instances


def _users(n, per_user=1):
    return [
        make_instance(instance_id=f"{u}-{j}", user_id=f"user{u:03d}")
        for u in range(n)
        for j in range(per_user)
    ]


def test_split_users_is_disjoint_and_exact():
    split = split_users(_users(150), 100, 50, seed=7)
    train_users = {inst.user_id for inst in split.train}
    test_users = {inst.user_id for inst in split.test}
    assert split.mode is SplitMode.USER
    assert len(train_users) == 100 and len(test_users) == 50
    assert not train_users & test_users


def test_split_users_is_deterministic():
    instances = _users(20, per_user=2)
    assert split_users(instances, 10, 5, seed=3) == split_users(instances, 10, 5, seed=3)


def test_split_users_needs_enough_users():
    with pytest.raises(InsufficientUsers):
        split_users(_users(3), 100, 50, seed=0)


def test_split_time_holds_out_latest():
    instances = [make_instance(instance_id=f"t{t}", timestamp=t) for t in (3, 1, 4, 2)]
    split = split_time(instances, 0.25)
    assert [inst.timestamp for inst in split.test] == [4]
    assert sorted(inst.timestamp for inst in split.train) == [1, 2, 3]


def test_split_time_falls_back_to_file_order():
    instances = [make_instance(instance_id=f"t{n}") for n in range(5)]
    split = split_time(instances, 0.2)
    assert [inst.instance_id for inst in split.test] == ["t4"]
    assert len(split.train) + len(split.test) == 5


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
def test_split_time_fraction_bounds(fraction):
    with pytest.raises(InvalidSplitFraction):
        split_time([make_instance(instance_id="a"), make_instance(instance_id="b")], fraction)


def test_split_time_single_instance_user():
    with pytest.raises(EmptyUserHistory):
        split_time([make_instance()], 0.5)


def test_split_summary_counts():
    split = split_time([make_instance(instance_id=f"t{n}", timestamp=n) for n in range(4)], 0.5)
    assert split.summary() == {"train_users": 1, "test_users": 1, "train_instances": 2, "test_instances": 2}
    assert len(split.side("all")) == 4
