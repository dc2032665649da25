"""Building the reference sets (all training anchors, tagged by relation and head)."""

from __future__ import annotations

import numpy as np

from kgrefine.evaluation import Embedder
from kgrefine.index import EXACT, ReferenceIndex
from kgrefine.sampling import SamplerConfig, sample_triplets
from kgrefine.store import KgStore

# epoch slot of the anchor draw used for the reference set, distinct from training epochs
REFERENCE_EPOCH = 1_000_003


def reference_anchors(store: KgStore, sampler_config: SamplerConfig, seed: int):
    """Source fact and partial-fact kind of every training anchor, all variants kept."""
    facts, kinds = [], []
    for ex in sample_triplets(store, sampler_config, seed, epoch=REFERENCE_EPOCH):
        facts.append(ex.anchor_fact)
        kinds.append(ex.anchor.kind)
    return np.asarray(facts, dtype=np.int64), kinds


def build_reference_index(
    store: KgStore,
    embedder: Embedder,
    sampler_config: SamplerConfig,
    seed: int,
    mode: str = EXACT,
    n_lists: int = 16,
    n_probe: int = 4,
) -> ReferenceIndex:
    """Embed every anchor and index it with its source relation/head payload.

    In the relation regime the n anchor variants of a fact are identical HT
    sequences; they are still all indexed.
    """
    facts, kinds = reference_anchors(store, sampler_config, seed)
    unique: dict = {}
    for f, k in zip(facts.tolist(), kinds):
        unique.setdefault((f, k), len(unique))
    keys = list(unique)
    by_kind: dict = {}
    for slot, (f, k) in enumerate(keys):
        by_kind.setdefault(k, []).append((slot, f))
    emb = np.empty((len(keys), embedder.encoder.dim))
    for kind, items in by_kind.items():
        slots = [s for s, _ in items]
        emb[slots] = embedder(store.train[[f for _, f in items]], kind)
    rows = np.array([unique[(f, k)] for f, k in zip(facts.tolist(), kinds)], dtype=np.int64)
    vectors = emb[rows]
    triples = store.train[facts]
    index = ReferenceIndex(mode=mode, n_lists=n_lists, n_probe=n_probe, seed=seed)
    return index.fit(vectors, relation=triples[:, 1], head=triples[:, 0], source_fact=facts)
