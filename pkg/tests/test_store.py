import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgrefine.exceptions import ArtifactError, DataFormatError
from kgrefine.store import (
    REVERSE_SUFFIX,
    add_reverse_relations,
    few_shot_relations,
    from_labeled_triples,
    ingest,
    load_store,
    relation_coverage,
    save_store,
    write_triples,
)


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_single_fact_store(tmp_path):
    train = _write(tmp_path / "train.txt", ["a\tr\tb"])
    store = ingest(train)
    s = store.stats()
    assert (s["relations"], s["entities"], s["train"], s["valid"], s["test"]) == (1, 2, 1, 0, 0)


def test_ingest_dedupes_and_reads_labels(tmp_path):
    train = _write(tmp_path / "train.txt", ["a\tr\tb", "a\tr\tb", "b\ts\tc"])
    valid = _write(tmp_path / "valid.txt", ["a\ts\tc\t1", "a\ts\tb\t-1"])
    store = ingest(train, valid)
    assert len(store.train) == 2
    assert store.valid_labels.tolist() == [1, -1]
    assert store.test_labels is None


@pytest.mark.parametrize(
    "first, line, msg",
    [
        ("a\tr\tb", "a\tr", "expected 3 or 4"),
        ("a\tr\tb\t1", "a\tr\tb\t0", "label must be"),
        ("a\tr\tb\t-1", "a\tr\tb\tyes", "label must be"),
        ("a\tr\tb", "a\tr\tc\t1", "inconsistent label"),
    ],
)
def test_malformed_lines_report_line_number(tmp_path, first, line, msg):
    train = _write(tmp_path / "train.txt", [first, line])
    with pytest.raises(DataFormatError, match=msg) as err:
        ingest(train)
    assert ":2:" in str(err.value)


def test_empty_train_is_an_error(tmp_path):
    with pytest.raises(DataFormatError, match="empty train"):
        ingest(_write(tmp_path / "train.txt", []))


def test_vocab_covers_all_splits(tmp_path):
    train = _write(tmp_path / "train.txt", ["a\tr\tb"])
    test = _write(tmp_path / "test.txt", ["c\tq\td"])
    store = ingest(train, None, test)
    assert store.n_entities == 4 and store.n_relations == 2
    assert list(store.entities) == ["a", "b", "c", "d"]


def test_contains(obama_store):
    s = obama_store
    e, r = s.entities.id, s.relations.id
    assert s.contains((e("Barack_Obama"), r("bornIn"), e("Honolulu")))
    assert not s.contains((e("Barack_Obama"), r("bornIn"), e("Chicago")))
    # only in test
    assert s.contains((e("Michel_Obama"), r("isMarriedTo"), e("Barack_Obama")))
    with pytest.raises(KeyError):
        s.contains((99, 0, 0))


def test_labeled_negatives_are_not_facts():
    s = from_labeled_triples([("a", "r", "b")], valid=[("a", "r", "c", -1), ("b", "r", "c", 1)])
    assert not s.contains((0, 0, 2))
    assert s.contains((1, 0, 2))
    assert s.stats()["valid"] == 1 and s.stats()["valid_negatives"] == 1


def test_by_relation_index_matches_scan(obama_store):
    s = obama_store
    for r in range(s.n_relations):
        scan = [i for i, row in enumerate(s.train.tolist()) if row[1] == r]
        assert s.facts_of_relation(r).tolist() == scan
    assert sum(len(s.facts_of_relation(r)) for r in range(s.n_relations)) == len(s.train)
    freq = s.relation_frequencies()
    assert all(freq[r] == len(s.facts_of_relation(r)) for r in range(s.n_relations))


def test_reverse_relations(obama_store):
    s = obama_store
    rev = add_reverse_relations(s)
    assert len(rev.train) == 2 * len(s.train)
    assert rev.n_relations == 2 * s.n_relations
    assert np.array_equal(rev.train[: len(s.train)], s.train)
    e = rev.entities.id
    inv = rev.relations.id("bornIn" + REVERSE_SUFFIX)
    assert rev.contains((e("Honolulu"), inv, e("Barack_Obama")))
    assert rev.is_reverse(inv) and not rev.is_reverse(rev.relations.id("bornIn"))
    with pytest.raises(ValueError, match="reserved suffix"):
        add_reverse_relations(rev)


def test_reverse_relations_empty_train():
    s = from_labeled_triples([("a", "r", "b")])
    empty = type(s)(s.entities, s.relations, np.empty((0, 3)), s.valid, s.test)
    assert len(add_reverse_relations(empty).train) == 0


def test_few_shot_relations_counts():
    train = [("a", "r1", f"x{i}") for i in range(5)] + [("a", "r2", "y"), ("b", "r3", "z")]
    s = from_labeled_triples(train, test=[("a", "r4", "b")])
    rels, frac = few_shot_relations(s, 2)
    ids = s.relations.id
    assert rels == {ids("r2"), ids("r3"), ids("r4")}
    assert frac == pytest.approx(2 / 7)
    rels_tr, _ = few_shot_relations(s, 2, train_only=True)
    assert rels_tr == {ids("r2"), ids("r3")}
    assert relation_coverage(s, 2) == pytest.approx(3 / 4)
    assert relation_coverage(s, 2, train_only=True) == pytest.approx(2 / 3)
    assert few_shot_relations(s, 0) == (set(), 0.0)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(0, 6), min_size=1, max_size=60),
    st.integers(0, 40),
    st.integers(0, 40),
)
def test_few_shot_monotone(rel_draws, a, b):
    s = from_labeled_triples([(f"h{i}", f"r{r}", f"t{i}") for i, r in enumerate(rel_draws)])
    lo, hi = sorted((a, b))
    assert few_shot_relations(s, lo)[0] <= few_shot_relations(s, hi)[0]


def test_binary_round_trip(tmp_path):
    s = from_labeled_triples(
        [("a b", "r", "c"), ("c", "r/x", "d")],
        valid=[("a b", "r", "d", -1), ("c", "r", "d", 1)],
        test=[("d", "r", "a b")],
        descriptions={"c": "a letter"},
    )
    s = add_reverse_relations(s)
    save_store(s, tmp_path / "s.bin", "abc123")
    back, h = load_store(tmp_path / "s.bin")
    assert h == "abc123"
    assert back.stats() == s.stats()
    assert back.entities == s.entities and back.relations == s.relations
    assert back.n_base_relations == s.n_base_relations
    assert back.valid_labels.tolist() == s.valid_labels.tolist() and back.test_labels is None
    assert dict(back.descriptions) == {"c": "a letter"}
    for split in ("train", "valid", "test"):
        assert np.array_equal(getattr(back, split), getattr(s, split))
    for h_ in range(s.n_entities):
        for r in range(s.n_relations):
            for t in range(s.n_entities):
                assert back.contains((h_, r, t)) == s.contains((h_, r, t))


def test_text_round_trip(tmp_path, obama_store):
    write_triples(tmp_path / "train.txt", obama_store.train, obama_store)
    write_triples(tmp_path / "test.txt", obama_store.test, obama_store)
    back = ingest(tmp_path / "train.txt", None, tmp_path / "test.txt")
    assert back.stats() == obama_store.stats()
    assert back.entities == obama_store.entities


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTASTORE" + b"\0" * 20)
    with pytest.raises(ArtifactError, match="bad magic"):
        load_store(p)
    with pytest.raises(ArtifactError, match="missing"):
        load_store(tmp_path / "nope.bin")
