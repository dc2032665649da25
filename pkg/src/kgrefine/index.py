"""Reference embedding index with exact and inverted-file (IVF) k-NN search."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from kgrefine.exceptions import ArtifactError
from kgrefine.store import read_header, write_header

EXACT = "exact"
IVF = "ivf"

INDEX_MAGIC = b"KGRINDEX"
INDEX_VERSION = 1

PAYLOAD_FIELDS = ("relation", "head", "source_fact")


@dataclass(frozen=True)
class ReferencePoint:
    position: int
    vector: np.ndarray
    relation: int
    head: int
    source_fact: int


Filter = Mapping[str, int] | Callable[[ReferencePoint], bool] | None


def kmeans(points: np.ndarray, n_clusters: int, n_iter: int = 25, seed: int = 0):
    """Lloyd's k-means with k-means++ seeding.

    An emptied cluster is re-seeded with the point of the largest cluster
    farthest from that cluster's centroid.  Returns ``(centroids, labels)``
    where ``labels`` assigns each point to its nearest final centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters={n_clusters} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = np.empty((n_clusters, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    closest = ((x - x[first]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(n, p=closest / total))
        else:
            pick = int(rng.integers(n))
        centroids[c] = x[pick]
        closest = np.minimum(closest, ((x - x[pick]) ** 2).sum(axis=1))

    labels = _assign(x, centroids)
    for _ in range(n_iter):
        counts = np.bincount(labels, minlength=n_clusters)
        for c in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(((x[members] - centroids[big]) ** 2).sum(axis=1))]
            labels[far] = c
            counts[big] -= 1
            counts[c] = 1
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        centroids = sums / counts[:, None]
        new = _assign(x, centroids)
        if np.array_equal(new, labels):
            break
        labels = new
    return centroids, _assign(x, centroids)


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), 4096):
        chunk = x[start : start + 4096]
        d = ((chunk[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        out[start : start + len(chunk)] = d.argmin(axis=1)
    return out


def _k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest values, ascending, ties by position."""
    if k >= len(d):
        return np.argsort(d, kind="stable")
    kth = np.partition(d, k - 1)[k - 1]
    cand = np.flatnonzero(d <= kth)
    return cand[np.argsort(d[cand], kind="stable")[:k]]


class ReferenceIndex(BaseEstimator):
    """k-NN index over embedding vectors carrying a (relation, head, source fact) payload.

    Vectors are held as float32 and compared in float64 squared L2, so a
    saved and reloaded index answers identically.  Reported distances are
    Euclidean.

    Parameters
    ----------
    mode : {"exact", "ivf"}
    n_lists : int
        Number of k-means cells for ``ivf``.
    n_probe : int
        Cells scanned per query in ``ivf`` mode.
    kmeans_iter : int
    seed : int
    """

    def __init__(self, mode=EXACT, n_lists=16, n_probe=4, kmeans_iter=25, seed=0):
        self.mode = mode
        self.n_lists = n_lists
        self.n_probe = n_probe
        self.kmeans_iter = kmeans_iter
        self.seed = seed

    def fit(self, X, relation=None, head=None, source_fact=None):
        if self.mode not in (EXACT, IVF):
            raise ValueError(f"unknown index mode {self.mode!r}")
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        n = len(X)
        self.vectors_ = X.astype(np.float32)
        self.dim_ = X.shape[1]
        payload = {}
        for name, values in zip(PAYLOAD_FIELDS, (relation, head, source_fact)):
            arr = np.full(n, -1, dtype=np.int64) if values is None else np.asarray(values, dtype=np.int64)
            if arr.shape != (n,):
                raise ValueError(f"{name} payload must have one entry per point")
            payload[name] = arr
        self.payload_ = payload
        if self.mode == IVF:
            if self.n_lists > n:
                raise ValueError(f"n_lists={self.n_lists} exceeds the number of points ({n})")
            x = self.vectors_.astype(np.float64)
            centroids, _ = kmeans(x, self.n_lists, self.kmeans_iter, self.seed)
            # round to the persisted precision so a reloaded index probes identically
            centroids = centroids.astype(np.float32).astype(np.float64)
            self._set_lists(centroids, _assign(x, centroids))
        else:
            self.centroids_ = np.empty((0, self.dim_))
            self.assignments_ = np.zeros(n, dtype=np.int64)
            self.lists_ = [np.arange(n)]
        return self

    def _set_lists(self, centroids: np.ndarray, labels: np.ndarray) -> None:
        self.centroids_ = np.asarray(centroids, dtype=np.float64)
        self.assignments_ = np.asarray(labels, dtype=np.int64)
        order = np.argsort(self.assignments_, kind="stable")
        bounds = np.searchsorted(self.assignments_[order], np.arange(len(self.centroids_) + 1))
        self.lists_ = [order[bounds[c] : bounds[c + 1]] for c in range(len(self.centroids_))]

    def __len__(self) -> int:
        check_is_fitted(self, "vectors_")
        return len(self.vectors_)

    def point(self, position: int) -> ReferencePoint:
        return ReferencePoint(
            int(position),
            self.vectors_[position].astype(np.float64),
            int(self.payload_["relation"][position]),
            int(self.payload_["head"][position]),
            int(self.payload_["source_fact"][position]),
        )

    # -- search ------------------------------------------------------------

    def _query(self, query) -> np.ndarray:
        check_is_fitted(self, "vectors_")
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape != (self.dim_,):
            raise ValueError(f"query dimension {q.shape[0]} != index dimension {self.dim_}")
        return q

    def _candidates(self, q: np.ndarray, n_probe: int | None) -> np.ndarray:
        if self.mode == EXACT:
            return self.lists_[0]
        n_probe = self.n_probe if n_probe is None else n_probe
        cd = ((self.centroids_ - q) ** 2).sum(axis=1)
        probe = np.argsort(cd, kind="stable")[: max(1, n_probe)]
        return np.sort(np.concatenate([self.lists_[c] for c in probe]))

    def _filter(self, cand: np.ndarray, where: Filter) -> np.ndarray:
        if where is None:
            return cand
        if callable(where):
            return np.array([i for i in cand.tolist() if where(self.point(i))], dtype=np.int64)
        keep = np.ones(len(cand), dtype=bool)
        for name, value in where.items():
            if name not in self.payload_:
                raise KeyError(f"unknown payload field {name!r}")
            keep &= self.payload_[name][cand] == value
        return cand[keep]

    def search(self, query, k: int, where: Filter = None, n_probe: int | None = None):
        """Positions and squared L2 distances of the k nearest points passing ``where``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self._query(query)
        cand = self._filter(self._candidates(q, n_probe), where)
        if len(cand) == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        d = ((self.vectors_[cand].astype(np.float64) - q) ** 2).sum(axis=1)
        sel = _k_smallest(d, k)
        return cand[sel], d[sel]

    def knn(self, query, k: int, where: Filter = None, n_probe: int | None = None):
        """``[(ReferencePoint, euclidean_distance), ...]`` nearest first."""
        pos, d2 = self.search(query, k, where, n_probe)
        return [(self.point(i), float(np.sqrt(d))) for i, d in zip(pos.tolist(), d2.tolist())]

    def distances(self, query, where: Filter = None) -> np.ndarray:
        """Euclidean distances to every point passing ``where`` (exact scan)."""
        q = self._query(query)
        cand = self._filter(np.arange(len(self.vectors_)), where)
        return np.sqrt(((self.vectors_[cand].astype(np.float64) - q) ** 2).sum(axis=1))

    def kneighbors(self, X, n_neighbors: int = 5, return_distance: bool = True):
        """Unfiltered batch search mirroring ``sklearn.neighbors.NearestNeighbors``.

        Requires at least ``n_neighbors`` reachable points per query.
        """
        X = check_array(X, dtype=np.float64)
        ind = np.empty((len(X), n_neighbors), dtype=np.int64)
        dist = np.empty((len(X), n_neighbors))
        for row, q in enumerate(X):
            pos, d2 = self.search(q, n_neighbors)
            if len(pos) < n_neighbors:
                raise ValueError("fewer reachable points than n_neighbors")
            ind[row], dist[row] = pos, np.sqrt(d2)
        return (dist, ind) if return_distance else ind

    # -- persistence -------------------------------------------------------

    def save(self, path, config_hash: str = "") -> None:
        check_is_fitted(self, "vectors_")
        n, n_lists = len(self.vectors_), len(self.centroids_)
        with open(path, "wb") as fh:
            write_header(fh, INDEX_MAGIC, INDEX_VERSION, config_hash)
            fh.write(struct.pack("<IBQIII", self.dim_, 1 if self.mode == IVF else 0, n, n_lists,
                                 self.n_probe, self.kmeans_iter))
            fh.write(struct.pack("<q", self.seed))
            fh.write(np.ascontiguousarray(self.centroids_, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.assignments_, dtype="<i4").tobytes())
            for name in PAYLOAD_FIELDS:
                fh.write(np.ascontiguousarray(self.payload_[name], dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.vectors_, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> tuple["ReferenceIndex", str]:
        path = Path(path)
        if not path.exists():
            raise ArtifactError(f"missing reference index: {path}")
        buf = memoryview(path.read_bytes())
        config_hash, pos = read_header(buf, INDEX_MAGIC, INDEX_VERSION, path)
        fmt = "<IBQIII"
        dim, ivf, n, n_lists, n_probe, iters = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        (seed,) = struct.unpack_from("<q", buf, pos)
        pos += 8

        def take(dtype, count):
            nonlocal pos
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
            pos += arr.nbytes
            return arr

        centroids = take("<f4", n_lists * dim).astype(np.float64).reshape(n_lists, dim)
        assignments = take("<i4", n).astype(np.int64)
        payload = {name: take("<i4", n).astype(np.int64) for name in PAYLOAD_FIELDS}
        vectors = take("<f4", n * dim).reshape(n, dim).astype(np.float32)
        if pos != len(buf):
            raise ArtifactError(f"{path}: trailing bytes in index file")
        index = cls(mode=IVF if ivf else EXACT, n_lists=n_lists if ivf else 16, n_probe=n_probe,
                    kmeans_iter=iters, seed=seed)
        index.vectors_ = vectors
        index.dim_ = dim
        index.payload_ = payload
        if ivf:
            index._set_lists(centroids, assignments)
        else:
            index.centroids_ = centroids
            index.assignments_ = assignments
            index.lists_ = [np.arange(n)]
        return index, config_hash
