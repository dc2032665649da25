"""Seeded block-structured synthetic knowledge graphs."""

from __future__ import annotations

import numpy as np

from kgrefine.store import KgStore, from_labeled_triples


def block_kg(
    n_relations: int = 20,
    n_train: int = 5000,
    n_valid: int = 200,
    n_test: int = 400,
    n_groups: int = 4,
    group_heads: int = 6,
    group_tails: int = 14,
    seed: int = 0,
) -> KgStore:
    """Graph with block-structured entity co-occurrence.

    Each relation owns ``n_groups`` disjoint (head group, tail group) blocks,
    and its facts are drawn without replacement from the pairs inside those
    blocks.  The relation of a fact is therefore recoverable from its
    (head, tail) pair, and the tails of a head come from one group.

    Valid/test hold held-out true facts (label +1) plus one corrupted-tail
    negative each (label -1): the tail is replaced uniformly over all
    entities and the corrupted triple is never a fact.  Every entity of a
    held-out fact also occurs in train.
    """
    rng = np.random.default_rng(seed)

    def split(total):
        return [total // n_relations + (r < total % n_relations) for r in range(n_relations)]

    n_tr, n_va, n_te = split(n_train), split(n_valid), split(n_test)
    pairs_per_rel = n_groups * group_heads * group_tails
    if max(a + b + c for a, b, c in zip(n_tr, n_va, n_te)) > pairs_per_rel:
        raise ValueError("blocks too small for the requested number of facts")

    # pair p of a relation -> (group, head slot, tail slot)
    g_of = np.arange(pairs_per_rel) // (group_heads * group_tails)
    h_of = g_of * group_heads + (np.arange(pairs_per_rel) % (group_heads * group_tails)) // group_tails
    t_of = g_of * group_tails + np.arange(pairs_per_rel) % group_tails

    train, valid_pos, test_pos = [], [], []
    for r in range(n_relations):
        need = n_tr[r] + n_va[r] + n_te[r]
        for _ in range(1000):
            pick = rng.permutation(pairs_per_rel)[:need]
            tr, rest = pick[: n_tr[r]], pick[n_tr[r] :]
            if set(h_of[rest]) <= set(h_of[tr]) and set(t_of[rest]) <= set(t_of[tr]):
                break
        else:
            raise RuntimeError("could not place held-out facts on train entities")
        facts = [(f"h{r}_{h_of[p]}", f"rel{r}", f"t{r}_{t_of[p]}") for p in pick.tolist()]
        train += facts[: n_tr[r]]
        valid_pos += facts[n_tr[r] : n_tr[r] + n_va[r]]
        test_pos += facts[n_tr[r] + n_va[r] :]

    entities = sorted({e for h, _, t in train for e in (h, t)})
    known = set(train) | set(valid_pos) | set(test_pos)

    def with_negatives(pos):
        rows = []
        for h, r, t in pos:
            rows.append((h, r, t, 1))
            while True:
                t2 = entities[rng.integers(len(entities))]
                if (h, r, t2) not in known:
                    break
            rows.append((h, r, t2, -1))
        return rows

    return from_labeled_triples(train, with_negatives(valid_pos), with_negatives(test_pos))


def positives(store: KgStore, split: str = "test") -> np.ndarray:
    """True facts of a labeled split."""
    triples = getattr(store, split)
    labels = getattr(store, f"{split}_labels")
    return triples if labels is None else triples[labels == 1]
