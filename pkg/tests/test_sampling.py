import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgrefine.sampling import (
    Regime,
    compute_close_relations,
    dump_examples,
    overlap_percentages,
    sample_entity_triplets,
    sample_relation_triplets,
)
from kgrefine.store import add_reverse_relations, from_labeled_triples
from kgrefine.synthetic import block_kg
from kgrefine.text import Kind


def _brute_close(store, threshold):
    """Set-intersection oracle over the train facts."""
    heads = {r: set() for r in range(store.n_relations)}
    tails = {r: set() for r in range(store.n_relations)}
    for h, r, t in store.train.tolist():
        heads[r].add(h)
        tails[r].add(t)
    out = {}
    for r in range(store.n_relations):
        out[r] = {}
        for r2 in range(store.n_relations):
            if r2 == r or not heads[r] or not heads[r2]:
                continue
            hp = 100 * len(heads[r] & heads[r2]) / len(heads[r])
            tp = 100 * len(tails[r] & tails[r2]) / len(tails[r])
            if max(hp, tp) >= threshold:
                out[r][r2] = (hp, tp)
    return out


def test_close_relations_hand_counted(overlap_store):
    s = overlap_store
    A, B, C = (s.relations.id(x) for x in "ABC")
    table = compute_close_relations(s, 40)
    # hand count: A/B share heads x1,x2 (2 of A's 4, both of B's 2); A/C share tail y1
    assert table[A] == {B: (50.0, 0.0)}
    assert table[B] == {A: (100.0, 0.0)}
    assert table[C] == {A: (0.0, 50.0)}
    assert compute_close_relations(s, 20)[A] == {B: (50.0, 0.0), C: (0.0, 25.0)}


def test_close_relations_single_relation():
    s = from_labeled_triples([("a", "r", "b"), ("c", "r", "b")])
    assert compute_close_relations(s, 0).close(0) == set()


def test_overlap_percentages_in_range(overlap_store):
    hp, tp = overlap_percentages(overlap_store)
    assert ((0 <= hp) & (hp <= 100)).all() and ((0 <= tp) & (tp <= 100)).all()


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3), st.integers(0, 5)), min_size=1, max_size=25),
    st.floats(0, 100),
    st.floats(0, 100),
)
def test_close_relations_matches_oracle_and_is_monotone(rows, t1, t2):
    s = from_labeled_triples([(f"e{h}", f"r{r}", f"e{t}") for h, r, t in rows])
    lo, hi = sorted((t1, t2))
    table = compute_close_relations(s, lo)
    oracle = _brute_close(s, lo)
    for r in range(s.n_relations):
        assert set(table[r]) == set(oracle[r])
        for r2, (hp, tp) in table[r].items():
            assert hp == pytest.approx(oracle[r][r2][0]) and tp == pytest.approx(oracle[r][r2][1])
        assert r not in table[r]
        assert compute_close_relations(s, hi).close(r) <= table.close(r)


def test_relation_regime_counts_and_constraints(overlap_store):
    s = overlap_store
    table = compute_close_relations(s, 40)
    ex = list(sample_relation_triplets(s, table, 5, rng_seed=3))
    assert len(ex) == 5 * len(s.train)
    for e in ex:
        r = s.train[e.anchor_fact, 1]
        assert e.regime is Regime.RELATION
        assert {e.anchor.kind, e.positive.kind, e.negative.kind} == {Kind.HT}
        assert s.train[e.positive_fact, 1] == r
        neg_r = s.train[e.negative_fact, 1]
        assert neg_r != r
        if table.close(r):
            assert neg_r in table.close(r) and not e.fallback_negative


def test_relation_regime_hundred_facts():
    s = block_kg(n_relations=4, n_train=100, n_valid=0, n_test=0, seed=1)
    ex = list(sample_relation_triplets(s, compute_close_relations(s), 5, rng_seed=0))
    assert len(ex) == 500


def test_relation_fallback_when_close_sets_empty():
    s = from_labeled_triples([("a", "r", "b"), ("c", "r", "d"), ("e", "q", "f"), ("g", "q", "h")])
    table = compute_close_relations(s, 100)
    assert all(not table.close(r) for r in range(2))
    for e in sample_relation_triplets(s, table, 4, rng_seed=0):
        assert e.fallback_negative
        assert s.train[e.negative_fact, 1] != s.train[e.anchor_fact, 1]


def test_relation_singleton_reuses_anchor():
    s = from_labeled_triples([("a", "r", "b"), ("c", "q", "d"), ("e", "q", "f")])
    ex = [e for e in sample_relation_triplets(s, compute_close_relations(s), 3, rng_seed=0) if e.anchor_fact == 0]
    assert all(e.reused_positive and e.positive_fact == 0 for e in ex)


def test_relation_positive_drawn_uniformly():
    s = from_labeled_triples([("a", "r", f"t{i}") for i in range(4)] + [("z", "q", "y")])
    ex = [e for e in sample_relation_triplets(s, compute_close_relations(s), 3000, rng_seed=5) if e.anchor_fact == 0]
    counts = Counter(e.positive_fact for e in ex)
    assert set(counts) == {1, 2, 3}
    assert all(abs(c / 3000 - 1 / 3) < 0.03 for c in counts.values())


def test_sampling_is_deterministic(overlap_store):
    table = compute_close_relations(overlap_store, 40)
    a = list(sample_relation_triplets(overlap_store, table, 5, rng_seed=9))
    b = list(sample_relation_triplets(overlap_store, table, 5, rng_seed=9))
    c = list(sample_relation_triplets(overlap_store, table, 5, rng_seed=10))
    assert a == b
    assert a != c
    assert list(sample_entity_triplets(overlap_store, 0.3, 5, 9)) == list(sample_entity_triplets(overlap_store, 0.3, 5, 9))


def test_worker_count_does_not_change_output():
    s = block_kg(n_relations=4, n_train=200, n_valid=0, n_test=0, seed=2)
    one = list(sample_entity_triplets(s, 0.3, 2, 7, workers=1))
    two = list(sample_entity_triplets(s, 0.3, 2, 7, workers=2))
    assert one == two


def _six_triple_store():
    return from_labeled_triples(
        [
            ("ann", "knows", "bob"), ("ann", "likes", "tea"),
            ("cat", "knows", "dan"), ("cat", "knows", "bob"),
            ("eve", "knows", "ann"), ("eve", "likes", "tea"),
        ],
        test=[("ann", "knows", "ann")],
    )


def test_entity_regime_negative_constraint_exhaustive():
    s = _six_triple_store()
    facts = {tuple(x) for x in np.concatenate([s.train, s.test]).tolist()}
    # all qualifying negatives per anchor, enumerated by hand-free brute force
    allowed = {}
    for i, (h, r, _t) in enumerate(s.train.tolist()):
        allowed[i] = {
            j for j, (hj, rj, tj) in enumerate(s.train.tolist())
            if rj == r and hj != h and (h, r, tj) not in facts
        }
    seen = set()
    for seed in range(40):
        for e in sample_entity_triplets(s, 0.5, 5, seed):
            h, r, _ = s.train[e.anchor_fact].tolist()
            assert s.train[e.positive_fact, 0] == h
            assert e.anchor.kind == e.negative.kind == e.positive.kind
            if e.fallback_negative:
                assert not allowed[e.anchor_fact]
                assert s.train[e.negative_fact, 0] != h
            else:
                assert e.negative_fact in allowed[e.anchor_fact]
                hj, rj, tj = s.train[e.negative_fact].tolist()
                assert (h, r, tj) not in facts and hj != h and rj == r
            seen.add((e.anchor_fact, e.negative_fact))
    # every qualifying (anchor, negative) pair is reachable
    assert {(i, j) for i, js in allowed.items() for j in js} <= seen


def test_entity_regime_singleton_head_reuses_anchor():
    s = _six_triple_store()
    s2 = from_labeled_triples([tuple(s.triple_labels(t)) for t in s.train] + [("zed", "likes", "tea")])
    z = s2.entities.id("zed")
    ex = [e for e in sample_entity_triplets(s2, 0.3, 4, 0) if s2.train[e.anchor_fact, 0] == z]
    assert ex and all(e.reused_positive and e.positive_fact == e.anchor_fact for e in ex)


def test_entity_regime_hrt_fraction():
    s = block_kg(n_relations=10, n_train=2000, n_valid=0, n_test=0, seed=3)
    ex = list(sample_entity_triplets(s, 0.3, 5, 11))
    assert len(ex) == 10_000
    frac = np.mean([e.anchor.kind is Kind.HRT for e in ex])
    assert abs(frac - 0.3) <= 0.02


def test_entity_regime_uses_reverse_relations():
    s = add_reverse_relations(_six_triple_store())
    inv = {e.anchor_fact for e in sample_entity_triplets(s, 0.0, 1, 0) if s.is_reverse(s.train[e.anchor_fact, 1])}
    assert inv == set(range(6, 12))


def test_dump_examples(tmp_path, overlap_store):
    ex = list(itertools.islice(sample_relation_triplets(overlap_store, compute_close_relations(overlap_store), 1, 0), 3))
    dump_examples(ex, tmp_path / "ex.tsv")
    lines = (tmp_path / "ex.tsv").read_text().splitlines()
    assert len(lines) == 3 and all(line.count("\t") == 3 and line.endswith("relation") for line in lines)
