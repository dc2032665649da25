"""Input validation helpers for id arrays passed to the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from kgrefine.store import KgStore


def check_store(store) -> KgStore:
    if not isinstance(store, KgStore):
        raise TypeError(f"expected a KgStore, got {type(store).__name__}")
    return store


def check_triples(X, store: KgStore) -> np.ndarray:
    """``(n, 3)`` int array of ``(head, relation, tail)`` ids valid in ``store``."""
    X = check_array(X, dtype=np.int64, ensure_min_samples=1)
    if X.shape[1] != 3:
        raise ValueError(f"expected (n, 3) triples, got shape {X.shape}")
    _check_entities(X[:, [0, 2]], store)
    if (X[:, 1] < 0).any() or (X[:, 1] >= store.n_relations).any():
        raise ValueError("relation id out of range")
    return X


def check_pairs(X, store: KgStore) -> np.ndarray:
    """``(n, 2)`` head/tail pairs; ``(n, 3)`` triples are accepted and reduced."""
    X = check_array(X, dtype=np.int64, ensure_min_samples=1)
    if X.shape[1] == 3:
        X = X[:, [0, 2]]
    if X.shape[1] != 2:
        raise ValueError(f"expected (n, 2) head/tail pairs, got shape {X.shape}")
    _check_entities(X, store)
    return X


def _check_entities(ids: np.ndarray, store: KgStore) -> None:
    if (ids < 0).any() or (ids >= store.n_entities).any():
        raise ValueError("entity id out of range")
