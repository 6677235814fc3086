import pytest
import torch

from exp.analogy.data import (
    KNOWN_STATS,
    DatasetStats,
    TripleStore,
    Vocab,
    build_filter_index,
    check_known_stats,
    dataset_paths,
    dataset_stats,
    load_dataset,
    load_dataset_dir,
    load_triples,
    load_vocab,
    save_vocab,
)
from exp.analogy.errors import DataError, DuplicateTripleError, TripleParseError, VocabularyError


def test_load_triples_builds_vocab(write_tsv):
    path = write_tsv("train.txt", [("a", "r", "b"), ("b", "r", "c"), ("c", "q", "a")])
    store, vocab = load_triples(path)
    assert len(store) == 3
    assert vocab.entity_names == ["a", "b", "c"]
    assert vocab.relation_names == ["r", "q"]
    assert store.as_tuples() == [(0, 0, 1), (1, 0, 2), (2, 1, 0)]


def test_names_round_trip(write_tsv):
    rows = [("x", "likes", "y"), ("y", "likes", "z")]
    store, vocab = load_triples(write_tsv("t.txt", rows))
    decoded = [(vocab.entity_name(s), vocab.relation_name(r), vocab.entity_name(o)) for s, r, o in store.as_tuples()]
    assert decoded == rows
    for name in vocab.entity_names:
        assert vocab.entity_name(vocab.entity_id(name)) == name


def test_empty_file_keeps_vocab(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("", encoding="utf-8")
    vocab = Vocab(["a"], ["r"])
    store, out = load_triples(path, vocab, "frozen")
    assert len(store) == 0
    assert out.entity_names == ["a"]


def test_duplicate_line_is_rejected_by_default(write_tsv):
    path = write_tsv("dup.txt", [("a", "r", "b"), ("b", "r", "c"), ("a", "r", "b")])
    with pytest.raises(DuplicateTripleError) as info:
        load_triples(path)
    assert info.value.line_nos == [3]
    assert "3" in str(info.value)


def test_duplicates_dropped_with_warning(write_tsv, observer, console_buffer):
    path = write_tsv("dup.txt", [("a", "r", "b"), ("b", "r", "c"), ("a", "r", "b")])
    store, _ = load_triples(path, allow_duplicates=True, observer=observer)
    assert len(store) == 2
    assert "duplicate" in console_buffer.getvalue()


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("a\tr\tb\nonly\ttwo\n", encoding="utf-8")
    with pytest.raises(TripleParseError) as info:
        load_triples(path)
    assert info.value.line_no == 2


def test_frozen_vocab_rejects_unknown_names(write_tsv):
    vocab = Vocab(["a", "b"], ["r"])
    with pytest.raises(VocabularyError) as info:
        load_triples(write_tsv("test.txt", [("a", "r", "zzz")]), vocab, "frozen")
    assert info.value.name == "zzz"


def test_build_mode_does_not_mutate_input_vocab(write_tsv):
    vocab = Vocab(["a"], ["r"])
    _, out = load_triples(write_tsv("t.txt", [("a", "r", "b")]), vocab, "build")
    assert vocab.entity_names == ["a"]
    assert out.entity_names == ["a", "b"]


def test_triple_store_rejects_duplicates():
    with pytest.raises(DataError):
        TripleStore(torch.tensor([[0, 0, 1], [0, 0, 1]]))


def test_filter_index_singleton():
    index = build_filter_index([TripleStore(torch.tensor([[0, 0, 1]]))])
    assert index.tails(0, 0) == {1}
    assert index.heads(0, 1) == {0}
    assert (0, 0, 1) in index


def test_filter_index_shared_key():
    index = build_filter_index([TripleStore(torch.tensor([[0, 0, 1], [0, 0, 2]]))])
    assert index.tails(0, 0) == {1, 2}


def test_filter_index_empty():
    index = build_filter_index([])
    assert len(index) == 0
    assert not index.known_tails
    assert not index.contains(torch.tensor([[0, 0, 0]])).any()


def test_filter_index_matches_linear_scan():
    g = torch.Generator().manual_seed(3)
    raw = torch.unique(torch.randint(0, 30, (2000, 3), generator=g), dim=0)
    raw[:, 1] %= 5
    raw = torch.unique(raw, dim=0)
    store = TripleStore(raw[:1500], "train")
    other = TripleStore(raw[1500:], "valid")
    index = build_filter_index([store])
    known = set(store.as_tuples())
    queries = torch.cat([store.triples[:200], other.triples[:200]])
    flags = index.contains(queries).tolist()
    for triple, flag in zip(queries.tolist(), flags):
        expected = tuple(triple) in known
        assert flag == expected
        assert (tuple(triple) in index) == expected


def test_vocab_dump_round_trip(tmp_path):
    vocab = Vocab(["alpha", "beta gamma", "δ"], ["rel/one", "rel two"])
    save_vocab(vocab, tmp_path)
    loaded = load_vocab(tmp_path)
    assert loaded.entity_names == vocab.entity_names
    assert loaded.relation_names == vocab.relation_names
    assert loaded.first_mismatch(vocab) is None


def test_vocab_first_mismatch_names_symbol():
    assert Vocab(["a", "b"], ["r"]).first_mismatch(Vocab(["a", "c"], ["r"])) == "entity 1: 'b' != 'c'"


def test_load_dataset_freezes_vocab_for_eval_splits(write_tsv):
    train = write_tsv("train.txt", [("a", "r", "b"), ("b", "r", "c")])
    valid = write_tsv("valid.txt", [("a", "r", "c")])
    test = write_tsv("test.txt", [("c", "r", "a")])
    dataset = load_dataset(train, valid, test)
    stats = dataset_stats(dataset)
    assert stats == DatasetStats(3, 1, 2, 1, 1)

    bad = write_tsv("bad.txt", [("a", "r", "unseen")])
    with pytest.raises(VocabularyError):
        load_dataset(train, valid, bad)


def test_known_stats_mismatches_are_listed():
    assert check_known_stats("wn18", KNOWN_STATS["wn18"]) == []
    off = DatasetStats(40_943, 18, 141_441, 5_000, 5_000)
    problems = check_known_stats("WN18", off)
    assert len(problems) == 1
    assert problems[0].startswith("num_train")
    assert check_known_stats("unknown", off) == []


def test_synthetic_kg_shape(planted):
    dataset = planted.dataset
    assert dataset.vocab.num_entities == 200
    assert dataset.vocab.num_relations == 4
    assert len(dataset.train) + len(dataset.test) == 200 * 4 * 3
    assert len(dataset.test) == 240
    train, test = set(dataset.train.as_tuples()), set(dataset.test.as_tuples())
    assert not train & test
    assert all(s != o for s, _, o in train)


def test_dataset_dir_picks_up_optional_splits(write_tsv, tmp_path):
    write_tsv("train.txt", [("a", "r", "b"), ("b", "r", "c")])
    write_tsv("test.txt", [("c", "r", "a")])
    assert dataset_paths(tmp_path) == (tmp_path / "train.txt", None, tmp_path / "test.txt")
    dataset = load_dataset_dir(tmp_path)
    assert dataset_stats(dataset) == DatasetStats(3, 1, 2, 0, 1)
