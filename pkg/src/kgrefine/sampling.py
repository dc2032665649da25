"""Triplet example generation for relation- and entity-centred clustering."""

from __future__ import annotations

import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np
from scipy import sparse

from kgrefine.store import KgStore
from kgrefine.text import Kind, PartialFact, make_partial_fact

DEFAULT_THRESHOLD_PCT = 30.0
DEFAULT_HRT_PROB = 0.3
DEFAULT_N_PER_ANCHOR = 5

_REJECTION_TRIES = 32


class Regime(str, enum.Enum):
    RELATION = "relation"
    ENTITY = "entity"


@dataclass(frozen=True)
class TripletExample:
    anchor: PartialFact
    positive: PartialFact
    negative: PartialFact
    regime: Regime
    # train row indices of the source facts
    anchor_fact: int
    positive_fact: int
    negative_fact: int
    reused_positive: bool = False
    fallback_negative: bool = False


@dataclass(frozen=True)
class SamplerConfig:
    regime: Regime = Regime.RELATION
    n_per_anchor: int = DEFAULT_N_PER_ANCHOR
    threshold_pct: float = DEFAULT_THRESHOLD_PCT
    hrt_prob: float = DEFAULT_HRT_PROB
    use_descriptions: bool = False
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.n_per_anchor < 1:
            raise ValueError("n_per_anchor must be >= 1")
        if not 0.0 <= self.hrt_prob <= 1.0:
            raise ValueError("hrt_prob must lie in [0, 1]")
        if not 0.0 <= self.threshold_pct <= 100.0:
            raise ValueError("threshold_pct must lie in [0, 100]")


class CloseRelationTable(Mapping):
    """``close_r`` per relation, with the head/tail overlap percentages of each member.

    ``table[r]`` is a dict ``{r2: (head_pct, tail_pct)}``.
    """

    def __init__(self, members: dict[int, dict[int, tuple[float, float]]], threshold_pct: float):
        self._members = members
        self.threshold_pct = threshold_pct

    def __getitem__(self, relation: int) -> dict[int, tuple[float, float]]:
        return self._members[relation]

    def __iter__(self):
        return iter(self._members)

    def __len__(self) -> int:
        return len(self._members)

    def close(self, relation: int) -> set[int]:
        return set(self._members.get(relation, ()))


def _incidence(store: KgStore, column: int) -> sparse.csr_matrix:
    train = store.train
    data = np.ones(len(train), dtype=np.float64)
    m = sparse.csr_matrix(
        (data, (train[:, 1], train[:, column])), shape=(store.n_relations, store.n_entities)
    )
    m.data[:] = 1.0  # duplicates summed by the constructor; keep set semantics
    return m


def overlap_percentages(store: KgStore) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise head and tail overlap percentages between relations.

    ``head_pct[r, r2] = 100 * |heads(F_r) & heads(F_r2)| / |heads(F_r)|``,
    tail analogously.  Rows of relations without train facts are zero.
    """
    out = []
    for column in (0, 2):
        inc = _incidence(store, column)
        inter = (inc @ inc.T).toarray()
        sizes = np.asarray(inc.sum(axis=1)).ravel()
        with np.errstate(divide="ignore", invalid="ignore"):
            pct = np.where(sizes[:, None] > 0, 100.0 * inter / sizes[:, None], 0.0)
        out.append(pct)
    return out[0], out[1]


def compute_close_relations(store: KgStore, threshold_pct: float = DEFAULT_THRESHOLD_PCT) -> CloseRelationTable:
    """A relation ``r2 != r`` is close to ``r`` when max(head%, tail%) >= threshold."""
    if not 0.0 <= threshold_pct <= 100.0:
        raise ValueError("threshold_pct must lie in [0, 100]")
    head_pct, tail_pct = overlap_percentages(store)
    score = np.maximum(head_pct, tail_pct)
    has_facts = store.relation_frequencies() > 0
    members: dict[int, dict[int, tuple[float, float]]] = {}
    for r in range(store.n_relations):
        row = {}
        if has_facts[r]:
            for r2 in np.flatnonzero((score[r] >= threshold_pct) & has_facts).tolist():
                if r2 != r:
                    row[r2] = (float(head_pct[r, r2]), float(tail_pct[r, r2]))
        members[r] = row
    return CloseRelationTable(members, threshold_pct)


def anchor_rng(seed: int, epoch: int, anchor: int) -> np.random.Generator:
    """Per-anchor generator so output does not depend on how anchors are partitioned."""
    return np.random.default_rng([seed, epoch, anchor])


class _PFCache:
    def __init__(self, store: KgStore, use_descriptions: bool):
        self.store = store
        self.use_descriptions = use_descriptions
        self._cache: dict[tuple[int, Kind], PartialFact] = {}

    def __call__(self, fact: int, kind: Kind) -> PartialFact:
        key = (fact, kind)
        pf = self._cache.get(key)
        if pf is None:
            pf = make_partial_fact(self.store.train[fact], kind, self.store, self.use_descriptions)
            self._cache[key] = pf
        return pf


def _draw_other(rng: np.random.Generator, pool: np.ndarray, exclude: int) -> int | None:
    """Uniform draw from ``pool`` minus ``exclude``; None if nothing is left."""
    n = len(pool)
    if n == 0 or (n == 1 and pool[0] == exclude):
        return None
    # pool rows are unique train indices, so exclude occurs at most once
    pos = int(np.searchsorted(pool, exclude))
    if pos < n and pool[pos] == exclude:
        j = int(rng.integers(n - 1))
        return int(pool[j + 1 if j >= pos else j])
    return int(pool[rng.integers(n)])


def _draw_where(rng: np.random.Generator, n_total: int, accept, exact_pool) -> int | None:
    """Uniform draw from the rows of ``range(n_total)`` satisfying ``accept``.

    Rejection sampling first; ``exact_pool()`` is materialised only when the
    acceptance rate looks low.  Both paths are uniform over the accepted set.
    """
    for _ in range(_REJECTION_TRIES):
        j = int(rng.integers(n_total))
        if accept(j):
            return j
    pool = exact_pool()
    if len(pool) == 0:
        return None
    return int(pool[rng.integers(len(pool))])


class _RelationPlan:
    def __init__(self, store: KgStore, table: CloseRelationTable):
        self.store = store
        self.neg_pools = {}
        for r in range(store.n_relations):
            close = sorted(table.close(r))
            if close:
                self.neg_pools[r] = np.sort(np.concatenate([store.facts_of_relation(c) for c in close]))
            else:
                self.neg_pools[r] = np.empty(0, dtype=np.int64)

    def sample(self, i: int, rng: np.random.Generator, n: int, pf) -> list[TripletExample]:
        store = self.store
        h, r, t = store.train[i].tolist()
        rels = store.train[:, 1]
        out = []
        for _ in range(n):
            pos = _draw_other(rng, store.facts_of_relation(r), i)
            reused = pos is None
            if reused:
                pos = i
            pool = self.neg_pools[r]
            fallback = len(pool) == 0
            if fallback:
                neg = _draw_where(
                    rng, len(rels), lambda j: rels[j] != r, lambda: np.flatnonzero(rels != r)
                )
                if neg is None:
                    raise ValueError(f"no fact with a relation other than {r} to draw a negative from")
            else:
                neg = int(pool[rng.integers(len(pool))])
            out.append(
                TripletExample(
                    pf(i, Kind.HT), pf(pos, Kind.HT), pf(neg, Kind.HT), Regime.RELATION,
                    i, pos, neg, reused, fallback,
                )
            )
        return out


class _EntityPlan:
    def __init__(self, store: KgStore, hrt_prob: float):
        self.store = store
        self.hrt_prob = hrt_prob

    def sample(self, i: int, rng: np.random.Generator, n: int, pf) -> list[TripletExample]:
        store = self.store
        train = store.train
        h, r, t = train[i].tolist()
        f_r = store.facts_of_relation(r)

        def qualifies(j: int) -> bool:
            hj, _, tj = train[j].tolist()
            return hj != h and not store.contains((h, r, tj))

        out = []
        for _ in range(n):
            kind = Kind.HRT if rng.random() < self.hrt_prob else Kind.RT
            pos = _draw_other(rng, store.facts_of_head(h), i)
            reused = pos is None
            if reused:
                pos = i
            neg = _draw_where(
                rng,
                len(f_r),
                lambda k: qualifies(int(f_r[k])),
                lambda: np.flatnonzero([qualifies(int(j)) for j in f_r]),
            )
            fallback = neg is None
            if fallback:
                heads = train[:, 0]
                neg = _draw_where(
                    rng, len(train), lambda j: heads[j] != h, lambda: np.flatnonzero(heads != h)
                )
                if neg is None:
                    raise ValueError(f"every train fact has head {h}; no negative available")
            else:
                neg = int(f_r[neg])
            out.append(
                TripletExample(
                    pf(i, kind), pf(pos, kind), pf(neg, kind), Regime.ENTITY,
                    i, pos, neg, reused, fallback,
                )
            )
        return out


def _sample_block(args) -> list[TripletExample]:
    plan, anchors, n, seed, epoch, use_descriptions = args
    pf = _PFCache(plan.store, use_descriptions)
    out: list[TripletExample] = []
    for i in anchors:
        out += plan.sample(int(i), anchor_rng(seed, epoch, int(i)), n, pf)
    return out


def _run(plan, n_per_anchor, seed, epoch, use_descriptions, workers, anchors=None) -> Iterator[TripletExample]:
    if n_per_anchor < 1:
        raise ValueError("n_per_anchor must be >= 1")
    if anchors is None:
        anchors = np.arange(len(plan.store.train))
    if workers <= 1 or len(anchors) < 2 * workers:
        pf = _PFCache(plan.store, use_descriptions)
        for i in anchors:
            yield from plan.sample(int(i), anchor_rng(seed, epoch, int(i)), n_per_anchor, pf)
        return
    blocks = np.array_split(np.asarray(anchors), workers * 4)
    jobs = [(plan, b, n_per_anchor, seed, epoch, use_descriptions) for b in blocks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk in pool.map(_sample_block, jobs):
            yield from chunk


def sample_relation_triplets(
    store: KgStore,
    table: CloseRelationTable,
    n_per_anchor: int = DEFAULT_N_PER_ANCHOR,
    rng_seed: int = 0,
    *,
    epoch: int = 0,
    use_descriptions: bool = False,
    workers: int = 1,
    anchors=None,
) -> Iterator[TripletExample]:
    """Relation regime: HT anchor, positive from F_r, hard negative from close_r.

    Every train fact is an anchor with ``n_per_anchor`` examples.  Negatives
    fall back to any fact of another relation when ``close_r`` is empty.
    """
    plan = _RelationPlan(store, table)
    return _run(plan, n_per_anchor, rng_seed, epoch, use_descriptions, workers, anchors)


def sample_entity_triplets(
    store: KgStore,
    hrt_prob: float = DEFAULT_HRT_PROB,
    n_per_anchor: int = DEFAULT_N_PER_ANCHOR,
    rng_seed: int = 0,
    *,
    epoch: int = 0,
    use_descriptions: bool = False,
    workers: int = 1,
    anchors=None,
) -> Iterator[TripletExample]:
    """Entity regime: RT (or HRT with ``hrt_prob``) partial facts grouped by head.

    The negative comes from a fact ``(h_j, r, t_j)`` sharing the anchor's
    relation with ``h_j != h`` and ``(h, r, t_j)`` unknown in every split.
    """
    if not 0.0 <= hrt_prob <= 1.0:
        raise ValueError("hrt_prob must lie in [0, 1]")
    plan = _EntityPlan(store, hrt_prob)
    return _run(plan, n_per_anchor, rng_seed, epoch, use_descriptions, workers, anchors)


def sample_triplets(store: KgStore, config: SamplerConfig, seed: int, epoch: int = 0,
                    table: CloseRelationTable | None = None) -> Iterator[TripletExample]:
    if config.regime is Regime.RELATION:
        if table is None:
            table = compute_close_relations(store, config.threshold_pct)
        return sample_relation_triplets(
            store, table, config.n_per_anchor, seed, epoch=epoch,
            use_descriptions=config.use_descriptions, workers=config.workers,
        )
    return sample_entity_triplets(
        store, config.hrt_prob, config.n_per_anchor, seed, epoch=epoch,
        use_descriptions=config.use_descriptions, workers=config.workers,
    )


def dump_examples(examples, path) -> None:
    """Write examples as ``anchor<TAB>positive<TAB>negative<TAB>regime`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.anchor.text}\t{ex.positive.text}\t{ex.negative.text}\t{ex.regime.value}\n")
