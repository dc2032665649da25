"""Triple classification and relation prediction over a reference index."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from kgrefine.encoder import Encoder
from kgrefine.index import ReferenceIndex
from kgrefine.store import KgStore, relation_coverage
from kgrefine.text import DEFAULT_MAX_SEQ_LEN, Kind, TokenVocab, encode_tokens, make_partial_fact

MIN, MAX, MEAN = "min", "max", "mean"
K_MODE = "k_mode"
GLOBAL_FALLBACK = "global_fallback"
PREDICT_NEGATIVE = "predict_negative"

FEW_SHOT_THRESHOLDS = (10, 15, 20, 25, 30)


@dataclass
class ClassifierConfig:
    aggregation: str = MIN
    sigma: float | None = None
    cold_start_policy: str = GLOBAL_FALLBACK

    def __post_init__(self):
        if self.aggregation not in (MIN, MAX, MEAN):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.cold_start_policy not in (GLOBAL_FALLBACK, PREDICT_NEGATIVE):
            raise ValueError(f"unknown cold-start policy {self.cold_start_policy!r}")


@dataclass(frozen=True)
class RelationPredictorConfig:
    strategy: str = K_MODE
    k: int = 10
    filtered: bool = True

    def __post_init__(self):
        if self.strategy not in (MIN, K_MODE):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class EvalReport:
    task: str
    metrics: dict
    slices: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class Embedder:
    """Turns triples into encoder embeddings of a given partial-fact kind."""

    def __init__(self, encoder: Encoder, vocab: TokenVocab, store: KgStore,
                 use_descriptions: bool = False, max_seq_len: int | None = None):
        self.encoder = encoder
        self.vocab = vocab
        self.store = store
        self.use_descriptions = use_descriptions
        if max_seq_len is None:
            max_seq_len = encoder.config.max_seq_len if encoder.config.architecture == "transformer" else DEFAULT_MAX_SEQ_LEN
        self.max_seq_len = max_seq_len

    def ids(self, triple, kind) -> np.ndarray:
        pf = make_partial_fact(triple, kind, self.store, self.use_descriptions)
        return encode_tokens(pf, self.vocab, self.max_seq_len)

    def __call__(self, triples, kind) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return self.encoder.encode([self.ids(t, kind) for t in triples.tolist()])


# -- triple classification ---------------------------------------------------


def aggregate(distances: np.ndarray, aggregation: str) -> float:
    if len(distances) == 0:
        return float("inf")
    if aggregation == MIN:
        return float(np.min(distances))
    if aggregation == MAX:
        return float(np.max(distances))
    if aggregation == MEAN:
        return float(np.mean(distances))
    raise ValueError(f"unknown aggregation {aggregation!r}")


def tune_sigma(distances: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Threshold maximising accuracy of ``+1 iff distance < sigma``.

    Candidates are the midpoints of consecutive distinct distances plus a
    lower sentinel (predict all negative) and an upper one (predict all
    positive).  For non-negative distances the sentinels are represented by
    ``0`` and ``max + 1``, keeping sigma finite.  Ties go to the smallest
    sigma.  Infinite distances (cold starts predicted negative) never count
    as positive.  Returns ``(sigma, accuracy)``.
    """
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels)
    if not set(np.unique(y).tolist()) <= {1, -1}:
        raise ValueError("labels must be +1/-1")
    if len(np.unique(y)) < 2:
        raise ValueError("validation set must contain both labels")
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    finite = np.unique(d[np.isfinite(d)])
    if len(finite):
        cands = np.concatenate([[0.0], (finite[:-1] + finite[1:]) / 2.0, [finite[-1] + 1.0]])
    else:
        cands = np.array([0.0])
    pos_sorted = np.sort(d[y == 1])
    neg_sorted = np.sort(d[y == -1])
    # positives with d < s are correct; negatives with d >= s are correct
    tp = np.searchsorted(pos_sorted, cands, side="left")
    tn = len(neg_sorted) - np.searchsorted(neg_sorted, cands, side="left")
    acc = (tp + tn) / len(d)
    best = int(np.argmax(acc))
    return float(cands[best]), float(acc[best])


def classification_distances(
    triples, embedder: Embedder, index: ReferenceIndex, config: ClassifierConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated distance of each triple's HRT embedding to its head's reference set.

    Returns ``(distances, cold_start_mask)``.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    emb = embedder(triples, Kind.HRT)
    out = np.empty(len(triples))
    cold = np.zeros(len(triples), dtype=bool)
    for i, (h, _r, _t) in enumerate(triples.tolist()):
        where = {"head": h}
        if config.aggregation == MIN:
            _, d2 = index.search(emb[i], 1, where)
            dists = np.sqrt(d2)
        else:
            dists = index.distances(emb[i], where)
        if len(dists) == 0:
            cold[i] = True
            if config.cold_start_policy == PREDICT_NEGATIVE:
                out[i] = np.inf
                continue
            if config.aggregation == MIN:
                _, d2 = index.search(emb[i], 1)
                dists = np.sqrt(d2)
            else:
                dists = index.distances(emb[i])
        out[i] = aggregate(dists, config.aggregation)
    return out, cold


def tune_sigma_on(triples, labels, embedder: Embedder, index: ReferenceIndex,
                  config: ClassifierConfig) -> tuple[float, float]:
    d, _ = classification_distances(triples, embedder, index, config)
    sigma, acc = tune_sigma(d, labels)
    config.sigma = sigma
    return sigma, acc


def decide(distance: float, sigma: float | None) -> int:
    if sigma is None:
        raise ValueError("sigma has not been tuned")
    return 1 if distance < sigma else -1


def classify(triple, embedder: Embedder, index: ReferenceIndex, config: ClassifierConfig,
             counters: Counter | None = None) -> int:
    if config.sigma is None:
        raise ValueError("sigma has not been tuned")
    d, cold = classification_distances([triple], embedder, index, config)
    if cold[0] and counters is not None:
        counters["cold_start"] += 1
    return decide(float(d[0]), config.sigma)


def evaluate_classification(triples, labels, embedder: Embedder, index: ReferenceIndex,
                            config: ClassifierConfig) -> EvalReport:
    if config.sigma is None:
        raise ValueError("sigma has not been tuned")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test split")
    d, cold = classification_distances(triples, embedder, index, config)
    pred = np.where(d < config.sigma, 1, -1)
    return EvalReport(
        task="triple_classification",
        metrics={"accuracy": float((pred == labels).mean()), "sigma": float(config.sigma), "n": int(len(labels))},
        counters={"cold_start": int(cold.sum())},
        config=asdict(config),
    )


# -- relation prediction -----------------------------------------------------


def rank_relations(neighbor_relations: Sequence[int], strategy: str) -> list[int]:
    """Order relations seen among distance-sorted neighbours.

    ``min``: by first (nearest) occurrence.  ``k_mode``: by frequency, ties
    by nearest occurrence.
    """
    first: dict[int, int] = {}
    counts: Counter = Counter()
    for pos, r in enumerate(neighbor_relations):
        r = int(r)
        first.setdefault(r, pos)
        counts[r] += 1
    if strategy == MIN:
        return sorted(first, key=first.__getitem__)
    if strategy == K_MODE:
        return sorted(first, key=lambda r: (-counts[r], first[r]))
    raise ValueError(f"unknown strategy {strategy!r}")


def known_other_relations(store: KgStore, head: int, tail: int, gold: int | None) -> set[int]:
    """Base relations ``r != gold`` with ``(head, r, tail)`` already a known fact."""
    return {
        r for r in range(store.n_base_relations)
        if r != gold and store.contains((head, r, tail))
    }


def predict_relation(head: int, tail: int, embedder: Embedder, index: ReferenceIndex,
                     config: RelationPredictorConfig, store: KgStore, gold: int | None = None):
    """Ranked relation list for ``(head, ?, tail)``.

    With filtering on, relations other than ``gold`` already known to hold
    between ``head`` and ``tail`` are dropped.  Returns
    ``(ranked, n_candidates)`` where ``n_candidates`` counts the relations
    still eligible after filtering.
    """
    if len(index) == 0:
        raise ValueError("empty reference index")
    query = embedder([(head, 0, tail)], Kind.HT)[0]
    return _ranked(query, head, tail, gold, index, config, store)


def _ranked(query, head, tail, gold, index, config, store):
    pos, _ = index.search(query, config.k)
    ranked = rank_relations(index.payload_["relation"][pos], config.strategy)
    ranked = [r for r in ranked if r < store.n_base_relations]
    n_candidates = store.n_base_relations
    if config.filtered:
        drop = known_other_relations(store, head, tail, gold)
        ranked = [r for r in ranked if r not in drop]
        n_candidates -= len(drop)
    return ranked, n_candidates


def gold_rank(ranked: Sequence[int], gold: int, n_candidates: int) -> int:
    """1-based rank of ``gold``; the worst rank ``n_candidates`` when unlisted."""
    try:
        return ranked.index(gold) + 1
    except ValueError:
        return n_candidates


def rank_metrics(ranks: Sequence[int]) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if len(ranks) == 0:
        raise ValueError("no ranks to summarise")
    return {"mr": float(ranks.mean()), "hits@1": float((ranks == 1).mean()), "n": int(len(ranks))}


def evaluate_relation_prediction(test_triples, embedder: Embedder, index: ReferenceIndex,
                                 config: RelationPredictorConfig, store: KgStore,
                                 dump_path=None) -> EvalReport:
    test_triples = np.asarray(test_triples, dtype=np.int64).reshape(-1, 3)
    if len(test_triples) == 0:
        raise ValueError("empty test split")
    ranks, preds = relation_ranks(test_triples, embedder, index, config, store)
    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8") as fh:
            fh.write("head\trelation\ttail\tpredicted\trank\n")
            for (h, r, t), p, rank in zip(test_triples.tolist(), preds, ranks.tolist()):
                pl = store.relations.label(p) if p is not None else ""
                fh.write("\t".join([*store.triple_labels((h, r, t)), pl, str(rank)]) + "\n")
    return EvalReport(
        task="relation_prediction",
        metrics=rank_metrics(ranks),
        counters={"unlisted_gold": int(sum(p is None for p in preds))},
        config=asdict(config),
    )


def relation_ranks(test_triples, embedder, index, config, store) -> tuple[np.ndarray, list]:
    """Filtered gold ranks and top predictions for every test triple."""
    test_triples = np.asarray(test_triples, dtype=np.int64).reshape(-1, 3)
    queries = embedder(test_triples, Kind.HT)
    ranks, preds = [], []
    for q, (h, r, t) in zip(queries, test_triples.tolist()):
        ranked, n_candidates = _ranked(q, h, t, r, index, config, store)
        ranks.append(gold_rank(ranked, r, n_candidates))
        preds.append(ranked[0] if ranked else None)
    return np.asarray(ranks, dtype=np.int64), preds


def few_shot_report(test_triples, ranks, store: KgStore, thresholds=FEW_SHOT_THRESHOLDS,
                    train_only: bool = False) -> dict:
    """Hits@1 restricted to test triples whose gold relation has < N train facts.

    Each slice also reports the share of relations it covers.  Empty slices
    carry ``hits@1 = None``.
    """
    test_triples = np.asarray(test_triples, dtype=np.int64).reshape(-1, 3)
    ranks = np.asarray(ranks)
    freq = store.relation_frequencies()
    out = {}
    for n in thresholds:
        sel = freq[test_triples[:, 1]] < n if len(test_triples) else np.zeros(0, dtype=bool)
        hits = float((ranks[sel] == 1).mean()) if sel.any() else None
        out[str(n)] = {
            "hits@1": hits,
            "n_test": int(sel.sum()),
            "relation_coverage": relation_coverage(store, n, train_only=train_only),
        }
    return out
