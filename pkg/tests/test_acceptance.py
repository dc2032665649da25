"""Acceptance criteria, one test each, every test printing a PASS/FAIL line.

Criteria 1 and 2 need the public benchmark files.  Point ``KGREFINE_DATA_DIR``
at a folder holding ``WN11/``, ``FB13/`` and ``FB15K/``; without it they fail.

Run ``python tests/test_acceptance.py`` for just the summary lines.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from kgrefine.encoder import BAG, TRANSFORMER, Encoder, EncoderConfig, backward
from kgrefine.estimators import RelationPredictor, TripleClassifier
from kgrefine.evaluation import K_MODE, MIN, Embedder, RelationPredictorConfig, relation_ranks
from kgrefine.index import IVF, ReferenceIndex
from kgrefine.reference import build_reference_index
from kgrefine.sampling import SamplerConfig, compute_close_relations, sample_entity_triplets, sample_relation_triplets
from kgrefine.store import few_shot_relations, ingest
from kgrefine.synthetic import block_kg, positives
from kgrefine.text import Kind, TokenVocab

sys.path.insert(0, str(Path(__file__).parent))
from oracles import brute_force_knn, numeric_gradient, oracle_gold_rank, relative_error, scalar_triplet_loss  # noqa: E402

DATA_DIR = os.environ.get("KGREFINE_DATA_DIR")

TABLE_STATS = {
    "WN11": {"relations": 11, "entities": 38_696, "train": 112_581, "valid": 2_609, "test": 10_544},
    "FB13": {"relations": 13, "entities": 75_043, "train": 316_232, "valid": 5_908, "test": 23_733},
    "FB15K": {"relations": 1_345, "entities": 14_951, "train": 483_142, "valid": 50_000, "test": 59_071},
}
SPLIT_FILES = {
    "train": ("train.txt", "freebase_mtr100_mte100-train.txt"),
    "valid": ("dev.txt", "valid.txt", "freebase_mtr100_mte100-valid.txt"),
    "test": ("test.txt", "freebase_mtr100_mte100-test.txt"),
}
CENSUS = {10: 37.8, 15: 43.2, 20: 48.4, 25: 51.8, 30: 54.9}


# collected lines are echoed in the terminal summary by conftest.py
RESULTS = []


def report(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, detail


def _dataset(name):
    if not DATA_DIR:
        return None, "KGREFINE_DATA_DIR not set; benchmark files unavailable"
    root = Path(DATA_DIR) / name
    paths = {}
    for split, names in SPLIT_FILES.items():
        found = [root / n for n in names if (root / n).exists()]
        if not found:
            return None, f"no {split} file under {root}"
        paths[split] = found[0]
    return paths, ""


# -- 1 -------------------------------------------------------------------------


@pytest.mark.parametrize("name", list(TABLE_STATS))
def test_criterion_1_dataset_statistics(name):
    paths, why = _dataset(name)
    if paths is None:
        report(f"1[{name}]", False, why)
    t0 = time.perf_counter()
    store = ingest(paths["train"], paths["valid"], paths["test"])
    elapsed = time.perf_counter() - t0
    stats = {k: store.stats()[k] for k in TABLE_STATS[name]}
    ok = stats == TABLE_STATS[name] and elapsed < 30
    report(f"1[{name}]", ok, f"got {stats}, expected {TABLE_STATS[name]}, {elapsed:.1f}s (limit 30s)")


# -- 2 -------------------------------------------------------------------------


def test_criterion_2_few_shot_census():
    paths, why = _dataset("FB15K")
    if paths is None:
        report("2", False, why)
    store = ingest(paths["train"], paths["valid"], paths["test"])
    rows, ok = [], True
    for n, expected in CENSUS.items():
        rels, frac = few_shot_relations(store, n)
        pct = 100 * len(rels) / store.n_base_relations
        ok &= abs(pct - expected) <= 1.0
        rows.append(f"<{n}: {pct:.1f}% (target {expected}%)")
    rels20, frac20 = few_shot_relations(store, 20)
    in_train, _ = few_shot_relations(store, 20, train_only=True)
    # 664 is ambiguous between the two relation universes; either may match, within 1% of 664
    ok &= min(abs(len(rels20) - 664), abs(len(in_train) - 664)) <= 0.01 * 664
    ok &= abs(100 * frac20 - 8.4) <= 0.1
    rows.append(f"<20 slice: {len(rels20)} relations ({len(in_train)} counting train-only; target ~664 +/-1%), "
                f"{100 * frac20:.2f}% of train (target 8.4 +/-0.1)")
    report("2", ok, "; ".join(rows))


# -- 3a ------------------------------------------------------------------------


@pytest.mark.parametrize("arch, tol", [(BAG, 1e-4), (TRANSFORMER, 1e-3)])
def test_criterion_3a_gradient_oracle(arch, tol):
    t0 = time.perf_counter()
    worst = 0.0
    for point in range(20):
        rng = np.random.default_rng(point)
        cfg = EncoderConfig(vocab_size=12, embedding_dim=6, architecture=arch, num_layers=2 if arch == TRANSFORMER else 1,
                            num_heads=2, feedforward_dim=8, max_seq_len=6, init_seed=point, init_scale=0.7)
        enc = Encoder(cfg)
        trip = tuple(rng.integers(1, 12, size=rng.integers(1, 6)) for _ in range(3))
        # margin wide enough that the hinge is active
        analytic = backward(enc, trip, 10.0)
        numeric = numeric_gradient(lambda: scalar_triplet_loss(enc, *trip, 10.0), enc.params)
        worst = max(worst, relative_error(analytic, numeric))
    elapsed = time.perf_counter() - t0
    report(f"3a[{arch}]", worst <= tol and elapsed < 60,
           f"max relative error {worst:.2e} over 20 points (limit {tol:.0e}), {elapsed:.1f}s (limit 60s)")


# -- 3b ------------------------------------------------------------------------


def test_criterion_3b_search_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 8)).astype(np.float32).astype(np.float64)
    heads = rng.integers(10, size=1000)
    index = ReferenceIndex().fit(x, head=heads)
    mismatches = checked = 0
    for q in rng.normal(size=(100, 8)):
        h = int(rng.integers(10))
        for k in (1, 5, 50):
            for where, keep in ((None, None), ({"head": h}, lambda i, h=h: heads[i] == h)):
                pos, d2 = index.search(q, k, where=where)
                oracle = brute_force_knn(x, q, k, keep)
                checked += 1
                same = pos.tolist() == [i for i, _ in oracle] and np.allclose(d2, [d for _, d in oracle], rtol=1e-12)
                mismatches += not same
    elapsed = time.perf_counter() - t0
    report("3b", mismatches == 0 and elapsed < 60,
           f"{mismatches} mismatches in {checked} filtered/unfiltered searches, {elapsed:.1f}s (limit 60s)")


# -- 3c ------------------------------------------------------------------------


def test_criterion_3c_ivf_recall():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    centers = rng.normal(scale=4.0, size=(16, 8))
    x = centers[rng.integers(16, size=10_000)] + rng.normal(scale=0.5, size=(10_000, 8))
    queries = centers[rng.integers(16, size=1000)] + rng.normal(scale=0.5, size=(1000, 8))
    exact = ReferenceIndex().fit(x)
    ivf = ReferenceIndex(mode=IVF, n_lists=16, n_probe=4, seed=0).fit(x)
    hits = sum(exact.search(q, 1)[0][0] == ivf.search(q, 1)[0][0] for q in queries)
    recall = hits / len(queries)
    elapsed = time.perf_counter() - t0
    report("3c", recall >= 0.9 and elapsed < 60, f"recall@1 {recall:.3f} (limit 0.9), {elapsed:.1f}s (limit 60s)")


# -- 3d ------------------------------------------------------------------------


def test_criterion_3d_rank_oracle():
    t0 = time.perf_counter()
    store = block_kg(n_relations=5, n_train=70, n_valid=0, n_test=14, n_groups=2, group_heads=3, group_tails=4, seed=2)
    vocab = TokenVocab.from_store(store)
    enc = Encoder(EncoderConfig(vocab_size=len(vocab), embedding_dim=8, init_seed=0))
    emb = Embedder(enc, vocab, store)
    index = build_reference_index(store, emb, SamplerConfig(regime="relation", n_per_anchor=2), seed=0)
    # true test facts plus train facts as queries; train facts make the filter bite
    queries = np.concatenate([positives(store), store.train[:30]])
    vectors = index.vectors_.astype(np.float64)
    q_emb = emb(queries, Kind.HT)
    mismatches = checked = 0
    for strategy in (MIN, K_MODE):
        for k in (1, 3, 10):
            ranks, _ = relation_ranks(queries, emb, index, RelationPredictorConfig(strategy, k, True), store)
            for (h, r, t), q, got in zip(queries.tolist(), q_emb, ranks.tolist()):
                nb = [int(index.payload_["relation"][i]) for i, _ in brute_force_knn(vectors, q, k)]
                known = {x for x in range(store.n_relations) if store.contains((h, x, t))}
                mismatches += got != oracle_gold_rank(nb, r, strategy, range(store.n_relations), known)
                checked += 1
    elapsed = time.perf_counter() - t0
    n_triples = len(store.train) + len(store.test)
    report("3d", mismatches == 0 and n_triples <= 100 and elapsed < 60,
           f"{mismatches} mismatches in {checked} ranks on a {n_triples}-triple KG, {elapsed:.1f}s (limit 60s)")


# -- 3e / 3f -----------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_kg():
    return block_kg(n_relations=20, n_train=5000, seed=0)


def test_criterion_3e_relation_learnability(synthetic_kg):
    t0 = time.perf_counter()
    model = RelationPredictor(architecture=BAG, epochs=4, strategy=K_MODE, k=10, seed=42).fit(synthetic_kg)
    hits = model.score(positives(synthetic_kg))
    elapsed = time.perf_counter() - t0
    ratio = model.loss_history_[-1] / model.initial_loss_
    ok = hits >= 0.95 and ratio <= 0.5 and elapsed < 120
    report("3e", ok, f"Hits@1 {hits:.3f} (limit 0.95), loss {model.initial_loss_:.3f} -> "
           f"{model.loss_history_[-1]:.3f} ratio {ratio:.3f} (limit 0.5), {elapsed:.1f}s (limit 120s)")


def test_criterion_3f_classification_learnability(synthetic_kg):
    t0 = time.perf_counter()
    model = TripleClassifier(architecture=BAG, epochs=4, aggregation=MIN, seed=42).fit(synthetic_kg)
    acc = model.score(synthetic_kg.test, synthetic_kg.test_labels)
    elapsed = time.perf_counter() - t0
    report("3f", acc >= 0.90 and elapsed < 120,
           f"test accuracy {acc:.3f} (limit 0.90), sigma {model.sigma_:.3f}, {elapsed:.1f}s (limit 120s)")


# -- 4 -------------------------------------------------------------------------


def test_criterion_4_sampler_constraints():
    store = block_kg(n_relations=20, n_train=2000, n_valid=100, n_test=100, n_groups=4, seed=4)
    train = store.train.tolist()
    facts = {tuple(x) for x in np.concatenate([store.train, store.valid[store.valid_labels == 1],
                                               store.test[store.test_labels == 1]]).tolist()}
    table = compute_close_relations(store)
    rel_bad = 0
    rel = list(sample_relation_triplets(store, table, 5, rng_seed=0))
    for e in rel:
        r = train[e.anchor_fact][1]
        rel_bad += train[e.positive_fact][1] != r
        rel_bad += e.positive_fact == e.anchor_fact and not e.reused_positive
        neg_r = train[e.negative_fact][1]
        rel_bad += neg_r == r
        rel_bad += bool(table.close(r)) and neg_r not in table.close(r)

    ent_bad = 0
    ent = list(sample_entity_triplets(store, 0.3, 5, 0))
    for e in ent:
        h, r, _ = train[e.anchor_fact]
        ent_bad += train[e.positive_fact][0] != h
        hj, rj, tj = train[e.negative_fact]
        if e.fallback_negative:
            # a fallback is only legal when no qualifying negative exists
            ent_bad += any(rr == r and hh != h and (h, r, tt) not in facts for hh, rr, tt in train)
        else:
            ent_bad += rj != r or hj == h or (h, r, tj) in facts
    hrt = np.mean([e.anchor.kind is Kind.HRT for e in ent])
    ok = len(rel) == len(ent) == 10_000 and rel_bad == 0 and ent_bad == 0 and abs(hrt - 0.3) <= 0.02
    report("4", ok, f"{len(rel)} relation / {len(ent)} entity examples, violations {rel_bad}/{ent_bad}, "
           f"HRT fraction {hrt:.4f} (0.30 +/- 0.02)")


# -- 5 -------------------------------------------------------------------------


def test_criterion_5_toy_determinism(tmp_path):
    import json

    from kgrefine.cli import main

    steps = [["ingest"], ["train", "--regime", "relation"], ["index", "--regime", "relation"], ["eval-relation"],
             ["train", "--regime", "entity"], ["index", "--regime", "entity"], ["eval-classify"], ["fewshot"]]
    reports = []
    for run in ("a", "b"):
        wd = tmp_path / run
        codes = [main([*s, "--toy", "--workdir", str(wd)]) for s in steps]
        assert codes == [0] * len(steps)
        reports.append((wd / "report.json").read_text())
    metrics = {t: v["metrics"] for t, v in json.loads(reports[0]).items() if "metrics" in v}
    report("5", reports[0] == reports[1], f"two seeded toy runs, identical reports: {reports[0] == reports[1]}; {metrics}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
