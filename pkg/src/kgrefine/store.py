"""Indexed triple store: ingestion, vocabularies, adjacency and persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from kgrefine.exceptions import ArtifactError, DataFormatError

REVERSE_SUFFIX = "__inv"

STORE_MAGIC = b"KGRSTORE"
STORE_VERSION = 1

SPLITS = ("train", "valid", "test")


class Vocab:
    """Bijective label <-> dense id mapping, ids contiguous from 0."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._ids: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self._labels)
            self._labels.append(label)
            self._ids[label] = idx
        return idx

    def id(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise KeyError(f"unknown label {label!r}") from None

    def label(self, idx: int) -> str:
        if not 0 <= idx < len(self._labels):
            raise KeyError(f"unknown id {idx}")
        return self._labels[idx]

    def __contains__(self, label: object) -> bool:
        return label in self._ids

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._labels == other._labels


@dataclass(frozen=True)
class KgStore:
    """Immutable knowledge graph with train/valid/test splits.

    Split arrays are ``(n, 3)`` int64 arrays of ``(head, relation, tail)``
    ids.  ``valid_labels``/``test_labels`` hold ``+1``/``-1`` per row when the
    source file carried a label column, else ``None``.
    """

    entities: Vocab
    relations: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    valid_labels: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    descriptions: Mapping[str, str] = field(default_factory=dict)
    n_base_relations: int | None = None

    def __post_init__(self):
        for name in SPLITS:
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("valid_labels", "test_labels"):
            lab = getattr(self, name)
            if lab is not None:
                lab = np.asarray(lab, dtype=np.int64)
                lab.setflags(write=False)
                object.__setattr__(self, name, lab)
        if self.n_base_relations is None:
            object.__setattr__(self, "n_base_relations", len(self.relations))

        facts = np.concatenate([self.train, self.valid, self.test])
        if len(facts):
            if facts[:, [0, 2]].max() >= len(self.entities) or facts.min() < 0:
                raise ValueError("entity id out of range")
            if facts[:, 1].max() >= len(self.relations):
                raise ValueError("relation id out of range")
        # Labeled negatives are not facts of the graph.
        known = set()
        for name, lab_name in (("train", None), ("valid", "valid_labels"), ("test", "test_labels")):
            arr = getattr(self, name)
            lab = getattr(self, lab_name) if lab_name else None
            for i, row in enumerate(arr.tolist()):
                if lab is None or lab[i] == 1:
                    known.add(tuple(row))
        object.__setattr__(self, "_known", frozenset(known))

        by_rel: dict[int, list[int]] = {r: [] for r in range(len(self.relations))}
        by_head: dict[int, list[int]] = {}
        for i, (h, r, _t) in enumerate(self.train.tolist()):
            by_rel[r].append(i)
            by_head.setdefault(h, []).append(i)
        object.__setattr__(
            self, "_by_relation", {r: np.asarray(v, dtype=np.int64) for r, v in by_rel.items()}
        )
        object.__setattr__(
            self, "_by_head", {h: np.asarray(v, dtype=np.int64) for h, v in by_head.items()}
        )

    # -- queries ---------------------------------------------------------

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def facts_of_relation(self, relation: int) -> np.ndarray:
        """Row indices into ``train`` of the facts with ``relation``."""
        return self._by_relation.get(relation, np.empty(0, dtype=np.int64))

    def facts_of_head(self, head: int) -> np.ndarray:
        return self._by_head.get(head, np.empty(0, dtype=np.int64))

    def relation_frequencies(self) -> np.ndarray:
        """Train fact count per relation id."""
        return np.bincount(self.train[:, 1], minlength=self.n_relations)

    def contains(self, triple: Sequence[int]) -> bool:
        """True iff the triple is a known fact of any split."""
        h, r, t = (int(x) for x in triple)
        if not (0 <= h < self.n_entities and 0 <= t < self.n_entities):
            raise KeyError(f"unknown entity id in {(h, r, t)}")
        if not 0 <= r < self.n_relations:
            raise KeyError(f"unknown relation id in {(h, r, t)}")
        return (h, r, t) in self._known

    __contains__ = contains

    def stats(self) -> dict:
        """Counts of relations, entities and true facts per split.

        Labeled rows marked -1 are not facts; they are counted separately
        under ``<split>_negatives``.
        """
        out = {"relations": self.n_relations, "entities": self.n_entities, "train": len(self.train)}
        for name in ("valid", "test"):
            labels = getattr(self, f"{name}_labels")
            n_neg = 0 if labels is None else int((labels == -1).sum())
            out[name] = len(getattr(self, name)) - n_neg
            out[f"{name}_negatives"] = n_neg
        return out

    def triple_labels(self, triple: Sequence[int]) -> tuple[str, str, str]:
        h, r, t = (int(x) for x in triple)
        return self.entities.label(h), self.relations.label(r), self.entities.label(t)

    def is_reverse(self, relation: int) -> bool:
        return relation >= self.n_base_relations


# -- ingestion ---------------------------------------------------------------


def _read_triples(path) -> tuple[list[tuple[str, str, str]], list[int] | None]:
    rows: list[tuple[str, str, str]] = []
    labels: list[int] = []
    seen: set = set()
    has_label: bool | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise DataFormatError(
                    f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}"
                )
            if has_label is None:
                has_label = len(parts) == 4
            elif has_label != (len(parts) == 4):
                raise DataFormatError(f"{path}:{lineno}: inconsistent label column")
            label = 1
            if len(parts) == 4:
                try:
                    label = int(parts[3])
                except ValueError:
                    label = 0
                if label not in (1, -1):
                    raise DataFormatError(f"{path}:{lineno}: label must be 1 or -1, got {parts[3]!r}")
            key = (parts[0], parts[1], parts[2], label)
            if key in seen:
                continue
            seen.add(key)
            rows.append((parts[0], parts[1], parts[2]))
            labels.append(label)
    return rows, (labels if has_label else None)


def read_descriptions(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise DataFormatError(f"{path}:{lineno}: expected 'entity<TAB>description'")
            out[label] = text
    return out


def ingest(train_path, valid_path=None, test_path=None, descriptions_path=None) -> KgStore:
    """Build a store from tab-separated triple files.

    Exact duplicate lines collapse within a split.  Vocabularies cover every
    split so that evaluation triples always resolve to ids.
    """
    raw = {}
    for name, path in zip(SPLITS, (train_path, valid_path, test_path)):
        raw[name] = _read_triples(path) if path else ([], None)
    if not raw["train"][0]:
        raise DataFormatError(f"{train_path}: empty train split")

    entities, relations = Vocab(), Vocab()
    arrays = {}
    for name in SPLITS:
        rows, _ = raw[name]
        arrays[name] = np.array(
            [(entities.add(h), relations.add(r), entities.add(t)) for h, r, t in rows],
            dtype=np.int64,
        ).reshape(-1, 3)
    descriptions = read_descriptions(descriptions_path) if descriptions_path else {}
    return KgStore(
        entities=entities,
        relations=relations,
        train=arrays["train"],
        valid=arrays["valid"],
        test=arrays["test"],
        valid_labels=None if raw["valid"][1] is None else np.array(raw["valid"][1]),
        test_labels=None if raw["test"][1] is None else np.array(raw["test"][1]),
        descriptions=descriptions,
    )


def from_labeled_triples(
    train: Iterable[tuple[str, str, str]],
    valid: Iterable = (),
    test: Iterable = (),
    descriptions: Mapping[str, str] | None = None,
) -> KgStore:
    """Build a store from in-memory label triples.

    ``valid``/``test`` rows may carry a fourth element (the +1/-1 label); a
    split is either fully labeled or not at all.
    """
    entities, relations = Vocab(), Vocab()
    arrays, labels = {}, {}
    for name, rows in zip(SPLITS, (train, valid, test)):
        seen, ids, labs = set(), [], []
        for row in rows:
            row = tuple(row)
            if row in seen:
                continue
            seen.add(row)
            h, r, t = row[:3]
            ids.append((entities.add(h), relations.add(r), entities.add(t)))
            if len(row) == 4:
                labs.append(int(row[3]))
        if labs and len(labs) != len(ids):
            raise DataFormatError(f"{name}: mixed labeled and unlabeled rows")
        arrays[name] = np.array(ids, dtype=np.int64).reshape(-1, 3)
        labels[name] = np.array(labs, dtype=np.int64) if labs else None
    if not len(arrays["train"]):
        raise DataFormatError("empty train split")
    return KgStore(
        entities, relations, arrays["train"], arrays["valid"], arrays["test"],
        labels["valid"], labels["test"], dict(descriptions or {}),
    )


def add_reverse_relations(store: KgStore) -> KgStore:
    """Add ``(t, r__inv, h)`` to train for every train fact ``(h, r, t)``."""
    for label in store.relations:
        if label.endswith(REVERSE_SUFFIX):
            raise ValueError(f"relation {label!r} already uses the reserved suffix {REVERSE_SUFFIX!r}")
    n_rel = store.n_relations
    relations = Vocab(store.relations.labels + [r + REVERSE_SUFFIX for r in store.relations.labels])
    rev = store.train[:, [2, 1, 0]].copy()
    rev[:, 1] += n_rel
    return KgStore(
        entities=store.entities,
        relations=relations,
        train=np.concatenate([store.train, rev]),
        valid=store.valid,
        test=store.test,
        valid_labels=store.valid_labels,
        test_labels=store.test_labels,
        descriptions=store.descriptions,
        n_base_relations=n_rel,
    )


def few_shot_relations(store: KgStore, max_facts: int, train_only: bool = False):
    """Relations with strictly fewer than ``max_facts`` train facts.

    Returns ``(relations, instance_fraction)`` where the fraction is the share
    of train facts those relations cover.  With ``train_only`` the relation
    universe is restricted to relations that occur in train.
    """
    freq = store.relation_frequencies()[: store.n_base_relations]
    mask = freq < max_facts
    if train_only:
        mask &= freq > 0
    rels = set(np.flatnonzero(mask).tolist())
    total = freq.sum()
    frac = float(freq[mask].sum() / total) if total else 0.0
    return rels, frac


def relation_coverage(store: KgStore, max_facts: int, train_only: bool = False) -> float:
    """Fraction of the relation universe with fewer than ``max_facts`` train facts."""
    freq = store.relation_frequencies()[: store.n_base_relations]
    universe = int((freq > 0).sum()) if train_only else len(freq)
    rels, _ = few_shot_relations(store, max_facts, train_only=train_only)
    return len(rels) / universe if universe else 0.0


# -- persistence -------------------------------------------------------------


def _pack_block(data: bytes) -> bytes:
    return struct.pack("<Q", len(data)) + data


def _unpack_block(buf: memoryview, pos: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    return bytes(buf[pos : pos + n]), pos + n


def write_header(fh, magic: bytes, version: int, config_hash: str = "") -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", version))
    h = config_hash.encode("ascii")
    fh.write(struct.pack("<H", len(h)) + h)


def read_header(buf: memoryview, magic: bytes, version: int, path) -> tuple[str, int]:
    if bytes(buf[: len(magic)]) != magic:
        raise ArtifactError(f"{path}: not a {magic.decode().strip()} file (bad magic)")
    pos = len(magic)
    (ver,) = struct.unpack_from("<I", buf, pos)
    if ver != version:
        raise ArtifactError(f"{path}: unsupported version {ver}, expected {version}")
    pos += 4
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    h = bytes(buf[pos : pos + n]).decode("ascii")
    return h, pos + n


def save_store(store: KgStore, path, config_hash: str = "") -> None:
    """Write the store as a versioned binary file."""
    meta = {
        "n_base_relations": store.n_base_relations,
        "descriptions": dict(store.descriptions),
        "has_valid_labels": store.valid_labels is not None,
        "has_test_labels": store.test_labels is not None,
    }
    with open(path, "wb") as fh:
        write_header(fh, STORE_MAGIC, STORE_VERSION, config_hash)
        fh.write(_pack_block("\n".join(store.entities).encode("utf-8")))
        fh.write(_pack_block("\n".join(store.relations).encode("utf-8")))
        fh.write(_pack_block(json.dumps(meta, sort_keys=True).encode("utf-8")))
        for name in SPLITS:
            fh.write(_pack_block(np.ascontiguousarray(getattr(store, name), dtype="<i4").tobytes()))
        for name in ("valid_labels", "test_labels"):
            lab = getattr(store, name)
            fh.write(_pack_block(b"" if lab is None else np.asarray(lab, dtype="<i1").tobytes()))


def load_store(path) -> tuple[KgStore, str]:
    """Read a store written by :func:`save_store`; returns ``(store, config_hash)``."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing store file: {path}")
    buf = memoryview(path.read_bytes())
    config_hash, pos = read_header(buf, STORE_MAGIC, STORE_VERSION, path)
    ent, pos = _unpack_block(buf, pos)
    rel, pos = _unpack_block(buf, pos)
    meta_raw, pos = _unpack_block(buf, pos)
    meta = json.loads(meta_raw)
    splits = {}
    for name in SPLITS:
        raw, pos = _unpack_block(buf, pos)
        splits[name] = np.frombuffer(raw, dtype="<i4").astype(np.int64).reshape(-1, 3)
    labels = {}
    for name, flag in (("valid_labels", "has_valid_labels"), ("test_labels", "has_test_labels")):
        raw, pos = _unpack_block(buf, pos)
        labels[name] = np.frombuffer(raw, dtype="<i1").astype(np.int64) if meta[flag] else None
    store = KgStore(
        entities=Vocab(ent.decode("utf-8").split("\n") if ent else []),
        relations=Vocab(rel.decode("utf-8").split("\n") if rel else []),
        descriptions=meta["descriptions"],
        n_base_relations=meta["n_base_relations"],
        **splits,
        **labels,
    )
    return store, config_hash


def write_triples(path, triples: np.ndarray, store: KgStore, labels=None) -> None:
    """Write id triples back out as a tab-separated label file."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(np.asarray(triples).tolist()):
            fields = list(store.triple_labels(row))
            if labels is not None:
                fields.append(str(int(labels[i])))
            fh.write("\t".join(fields) + "\n")
