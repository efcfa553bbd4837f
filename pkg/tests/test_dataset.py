import json
import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tiedgnn.dataset import (
    DataError,
    ItemVocab,
    LabeledInstance,
    RawEvent,
    SessionCorpus,
    augment_split,
    file_sha256,
    filter_corpus,
    group_events,
    load_sessions,
    make_splits,
    read_bundle,
    write_bundle,
)


def corpus_of(raw_sessions):
    events = []
    clock = 0
    for sid, seq in enumerate(raw_sessions):
        for item in seq:
            events.append(RawEvent(f"s{sid}", str(item), clock))
            clock += 1
    return group_events(events)


def decoded(corpus):
    return [[corpus.vocab.reverse[i] for i in s] for s in corpus.sessions]


class TestLoadSessions:
    def test_tsv(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("a\tx\t1\na\ty\t2\nb\tx\t5\n")
        events, bad = load_sessions(path, "tsv")
        assert bad == 0
        assert events == [RawEvent("a", "x", 1), RawEvent("a", "y", 2), RawEvent("b", "x", 5)]

    def test_header_is_skipped(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("session_id\titem_id\torder_key\na\tx\t1\n")
        assert load_sessions(path)[0] == [RawEvent("a", "x", 1)]

    def test_jsonl(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_text(json.dumps({"session_id": 1, "item_id": "p", "order_key": 3}) + "\n")
        assert load_sessions(path, "jsonl")[0] == [RawEvent("1", "p", 3)]

    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "e.tsv"
        path.write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_sessions(path) == ([], 0)
        assert "no events" in caplog.text

    def test_one_malformed_in_hundred(self, tmp_path):
        lines = [f"s{i // 4}\ti{i}\t{i}" for i in range(99)]
        lines.insert(50, "broken line without tabs")
        path = tmp_path / "e.tsv"
        path.write_text("\n".join(lines) + "\n")
        events, bad = load_sessions(path, "tsv", tolerance=0.05)
        assert (len(events), bad) == (99, 1)

    def test_too_many_malformed(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("a\tx\t1\nnope\nalso bad\n")
        with pytest.raises(DataError, match="tolerance"):
            load_sessions(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_sessions(tmp_path / "absent.tsv")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DataError):
            load_sessions(tmp_path / "x", "csv")


class TestGrouping:
    def test_sorted_by_order_key_within_session(self):
        events = [RawEvent("s", "b", 2), RawEvent("s", "a", 1), RawEvent("t", "c", 0)]
        corpus = group_events(events)
        assert decoded(corpus) == [["c"], ["a", "b"]]

    def test_vocab_is_bijective(self):
        corpus = corpus_of([["x", "y"], ["y", "z", "x"]])
        v = corpus.vocab
        assert all(v.reverse[v.forward[raw]] == raw for raw in v.reverse)
        assert sorted(v.forward.values()) == list(range(v.size))

    def test_gap_split(self):
        events = [RawEvent("u", "a", 0), RawEvent("u", "b", 10), RawEvent("u", "c", 100), RawEvent("u", "d", 105)]
        assert decoded(group_events(events, split_gap_seconds=30)) == [["a", "b"], ["c", "d"]]
        assert decoded(group_events(events)) == [["a", "b", "c", "d"]]

    def test_duplicate_vocab_rejected(self):
        with pytest.raises(DataError):
            ItemVocab(["a", "a"])


class TestFilter:
    def test_cascade_to_empty(self):
        corpus = corpus_of([["a", "b"], ["a", "c"], ["a", "d"], ["a", "e"], ["a", "f"]])
        with pytest.raises(DataError, match="5 sessions"):
            filter_corpus(corpus, min_len=2, min_item_count=5)

    def test_threshold_one_only_drops_short_sessions(self):
        corpus = corpus_of([["a", "b"], ["c"], ["b", "a", "d"]])
        out = filter_corpus(corpus, min_len=2, min_item_count=1)
        assert decoded(out) == [["a", "b"], ["b", "a", "d"]]

    def test_length_one_session_removed(self):
        corpus = corpus_of([["x"], ["x", "y"]])
        assert decoded(filter_corpus(corpus, 2, 1)) == [["x", "y"]]

    def test_reindexed_densely(self):
        corpus = corpus_of([["r"], ["a", "b"]] * 2)
        out = filter_corpus(corpus, 2, 1)
        assert out.vocab.reverse == ["a", "b"]
        assert out.sessions == [[0, 1], [0, 1]]

    @given(st.lists(st.lists(st.integers(0, 8), min_size=1, max_size=6), min_size=1, max_size=25), st.integers(1, 4))
    def test_fixed_point(self, sessions, min_count):
        corpus = corpus_of(sessions)
        try:
            out = filter_corpus(corpus, 2, min_count)
        except DataError:
            return
        counts = {}
        for s in out.sessions:
            for x in s:
                counts[x] = counts.get(x, 0) + 1
        assert all(c >= min_count for c in counts.values())
        assert all(len(s) >= 2 for s in out.sessions)
        assert all(x < out.vocab.size for s in out.sessions for x in s)

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            filter_corpus(SessionCorpus([], ItemVocab([]), []))


class TestAugment:
    def test_three_items(self):
        assert augment_split([7, 8, 9]) == [LabeledInstance((7,), 8), LabeledInstance((7, 8), 9)]

    def test_two_items(self):
        assert augment_split([1, 2]) == [LabeledInstance((1,), 2)]

    def test_seven_items(self):
        assert len(augment_split(list(range(7)))) == 6

    def test_too_short(self):
        assert augment_split([4]) == []

    def test_truncation_keeps_recent(self):
        out = augment_split(list(range(6)), max_len=3)
        assert out[-1] == LabeledInstance((2, 3, 4), 5)
        assert len(out) == 5

    @given(st.lists(st.lists(st.integers(0, 5), min_size=2, max_size=9), max_size=10))
    def test_count(self, sessions):
        assert sum(len(augment_split(s)) for s in sessions) == sum(len(s) - 1 for s in sessions)


def counting_corpus(n_sessions, length=2):
    """Sessions over a shared item pool so every test item is seen in training."""
    return corpus_of([[f"i{(k + j) % 5}" for j in range(length)] for k in range(n_sessions)])


class TestSplits:
    def test_tail_fraction_counts(self):
        splits = make_splits(counting_corpus(100), "tail_fraction", 0.2, seed=0)
        assert len(splits.train_sessions) == 80
        assert len(splits.test_sessions) == 20

    def test_validation_fraction(self):
        splits = make_splits(counting_corpus(1125), "tail_fraction", 0.2, seed=0)
        assert len(splits.train) + len(splits.valid) == 900
        assert len(splits.valid) == 90

    def test_deterministic(self):
        c = counting_corpus(60, 4)
        a, b = make_splits(c, seed=3), make_splits(c, seed=3)
        assert (a.train, a.valid, a.test) == (b.train, b.valid, b.test)
        assert make_splits(c, seed=4).valid != a.valid

    def test_last_k_periods(self):
        events = [RawEvent(f"s{i}", f"i{i % 3}", 10 * i + j) for i in range(10) for j in range(2)]
        splits = make_splits(group_events(events), "last_k_periods", 25, seed=0)
        assert len(splits.test_sessions) == 3

    def test_unseen_test_items_dropped(self):
        corpus = corpus_of([["a", "b"]] * 8 + [["a", "z", "b"], ["z", "q"]])
        splits = make_splits(corpus, "tail_fraction", 0.2, seed=0)
        assert splits.vocab.reverse == ["a", "b"]
        assert splits.test_sessions == [[0, 1]]

    def test_empty_split(self):
        with pytest.raises(DataError):
            make_splits(counting_corpus(3), "tail_fraction", 0.1)

    def test_bad_policy(self):
        with pytest.raises(DataError):
            make_splits(counting_corpus(10), "random", 0.2)


class TestBundle:
    def test_roundtrip_and_determinism(self, tmp_path):
        splits = make_splits(counting_corpus(50, 3), seed=1)
        paths_a = write_bundle(tmp_path / "a", splits)
        paths_b = write_bundle(tmp_path / "b", splits)
        for key in paths_a:
            assert file_sha256(paths_a[key]) == file_sha256(paths_b[key])
        bundle = read_bundle(tmp_path / "a")
        assert bundle.train == splits.train and bundle.valid == splits.valid and bundle.test == splits.test
        assert bundle.vocab.reverse == splits.vocab.reverse
        stats = json.loads(paths_a["stats"].read_text())
        assert stats["items"] == splits.vocab.size and stats["train_instances"] == len(splits.train)

    def test_missing_bundle(self, tmp_path):
        with pytest.raises(DataError):
            read_bundle(tmp_path / "nothing")
