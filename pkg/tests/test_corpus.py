import json
from collections import Counter
from dataclasses import dataclass

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reentra.corpus import ContractRecord, corpus_stats, load_manifest, stratified_kfold
from reentra.errors import IngestionError, ManifestParseError, ValidationError


@dataclass(frozen=True)
class Item:
    id: str
    label: int


def items(labels):
    return [Item(f"r{i}", y) for i, y in enumerate(labels)]


def write_manifest(tmp_path, entries, files=("a.sol", "b.sol")):
    for name in files:
        (tmp_path / name).write_text("contract C {}\n")
    path = tmp_path / "manifest.jsonl"
    path.write_text("".join((e if isinstance(e, str) else json.dumps(e)) + "\n" for e in entries))
    return path


class TestLoadManifest:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        assert load_manifest(path) == []

    def test_two_lines_in_order(self, tmp_path):
        path = write_manifest(tmp_path, [{"path": "a.sol", "label": 1}, {"path": "b.sol", "label": 0, "id": "bee"}])
        recs = load_manifest(path)
        assert [r.label for r in recs] == [1, 0]
        assert [r.id for r in recs] == ["a.sol", "bee"]
        assert recs[0].source == b"contract C {}\n"
        assert recs[0].category is None

    def test_blank_lines_skipped(self, tmp_path):
        path = write_manifest(tmp_path, [{"path": "a.sol", "label": 1}, "", {"path": "b.sol", "label": 0}])
        assert len(load_manifest(path)) == 2

    @pytest.mark.parametrize("label", [2, -1, "1", True, None])
    def test_bad_label(self, tmp_path, label):
        path = write_manifest(tmp_path, [{"path": "a.sol", "label": label}])
        with pytest.raises(ManifestParseError, match="label must be 0 or 1") as info:
            load_manifest(path)
        assert info.value.line_no == 1

    def test_malformed_line_names_line_number(self, tmp_path):
        path = write_manifest(tmp_path, [{"path": "a.sol", "label": 1}, "{not json"])
        with pytest.raises(ManifestParseError, match="manifest line 2"):
            load_manifest(path)

    def test_missing_path_key(self, tmp_path):
        path = write_manifest(tmp_path, [{"label": 1}])
        with pytest.raises(ManifestParseError):
            load_manifest(path)

    def test_duplicate_id(self, tmp_path):
        path = write_manifest(tmp_path, [{"path": "a.sol", "label": 1, "id": "x"}, {"path": "b.sol", "label": 0, "id": "x"}])
        with pytest.raises(ValidationError, match="duplicate"):
            load_manifest(path)

    def test_unreadable_contract(self, tmp_path):
        path = write_manifest(tmp_path, [{"path": "missing.sol", "label": 1}])
        with pytest.raises(IngestionError, match="missing.sol"):
            load_manifest(path)

    def test_unreadable_contract_lenient(self, tmp_path):
        path = write_manifest(tmp_path, [{"path": "missing.sol", "label": 1}, {"path": "a.sol", "label": 0}])
        errors = []
        recs = load_manifest(path, on_error=errors.append)
        assert [r.id for r in recs] == ["a.sol"]
        assert len(errors) == 1 and isinstance(errors[0], IngestionError)

    def test_synthetic_fixture(self, fixtures_dir):
        recs = load_manifest(fixtures_dir / "synthetic" / "manifest.jsonl")
        assert len(recs) == 40
        assert Counter(r.label for r in recs) == {0: 20, 1: 20}


def assert_valid_split(split, records, k):
    assert split.k == k
    assert sorted(split.assignments) == sorted(r.id for r in records)
    assert all(0 <= f < k for f in split.assignments.values())
    folds = split.folds()
    assert sorted(i for fold in folds for i in fold) == sorted(r.id for r in records)
    label_of = {r.id: r.label for r in records}
    for y in (0, 1):
        counts = [sum(label_of[i] == y for i in fold) for fold in folds]
        assert max(counts) - min(counts) <= 1


class TestStratifiedKFold:
    def test_exact_divisibility(self):
        recs = items([1] * 10 + [0] * 10)
        split = stratified_kfold(recs, 5, seed=3)
        for fold in split.folds():
            labels = Counter(int(i[1:]) < 10 for i in fold)
            assert labels == {True: 2, False: 2}

    def test_deterministic(self):
        recs = items([1, 0] * 9)
        assert stratified_kfold(recs, 4, 11) == stratified_kfold(recs, 4, 11)

    def test_seven_three(self):
        recs = items([1] * 7 + [0] * 3)
        split = stratified_kfold(recs, 3, seed=0)
        pos = sorted(sum(int(i[1:]) < 7 for i in fold) for fold in split.folds())
        neg = sorted(sum(int(i[1:]) >= 7 for i in fold) for fold in split.folds())
        assert pos == [2, 2, 3]
        assert neg == [1, 1, 1]

    @pytest.mark.parametrize("k", [1, 0, 11])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            stratified_kfold(items([0, 1] * 5), k, 0)

    def test_leave_one_out(self):
        recs = items([0, 1, 0, 1])
        split = stratified_kfold(recs, 4, 0)
        assert sorted(len(f) for f in split.folds()) == [1, 1, 1, 1]

    @settings(max_examples=100, deadline=None)
    @given(
        labels=st.lists(st.integers(0, 1), min_size=10, max_size=500),
        k=st.sampled_from([2, 5, 10]),
        seed=st.integers(0, 2**31),
    )
    def test_partition_and_stratification(self, labels, k, seed):
        recs = items(labels)
        assert_valid_split(stratified_kfold(recs, k, seed), recs, k)


class TestCorpusStats:
    def rec(self, label, category=None, i=0):
        return ContractRecord(f"c{i}", "p", b"", label, category)

    def test_empty(self):
        stats = corpus_stats([])
        assert stats.total == 0 and stats.per_label == {} and stats.per_category == {}

    def test_label_counts(self):
        stats = corpus_stats([self.rec(1), self.rec(1), self.rec(1), self.rec(0)])
        assert stats.total == 4
        assert stats.per_label == {1: 3, 0: 1}

    def test_category_counts(self):
        stats = corpus_stats([self.rec(0, "games"), self.rec(1, "games"), self.rec(1, "gambling")])
        assert stats.per_category == {"games": 2, "gambling": 1}

    def test_uncategorized_and_totals(self):
        stats = corpus_stats([self.rec(0), self.rec(1, "games")])
        assert stats.per_category == {"uncategorized": 1, "games": 1}
        assert stats.total == sum(stats.per_label.values()) == sum(stats.per_category.values())

    def test_to_dict(self):
        doc = corpus_stats([self.rec(0, "b"), self.rec(1, "a")]).to_dict()
        assert doc == {"total": 2, "per_label": {"0": 1, "1": 1}, "per_category": {"a": 1, "b": 1}}
