"""Partial facts: token sequences built from the known parts of a triple."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from kgrefine.store import KgStore

PAD_ID = 0
OOV_ID = 1
N_RESERVED = 2

DEFAULT_MAX_SEQ_LEN = 32
DEFAULT_MAX_SEQ_LEN_DESC = 128
DEFAULT_MAX_DESC_TOKENS = 24

_SPLIT_RE = re.compile(r"[\s_/]+")


class Kind(str, enum.Enum):
    HT = "HT"
    RT = "RT"
    HRT = "HRT"


@dataclass(frozen=True)
class PartialFact:
    kind: Kind
    tokens: tuple[str, ...]
    source: tuple[int, int, int]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"empty partial fact for {self.source}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def tokenize_label(label: str) -> list[str]:
    """Split a surface label on whitespace, underscores and slashes."""
    return [tok for tok in _SPLIT_RE.split(label) if tok]


def _entity_tokens(store: KgStore, entity: int, use_descriptions: bool, max_desc_tokens: int):
    label = store.entities.label(entity)
    tokens = tokenize_label(label) or [label]
    if use_descriptions:
        desc = store.descriptions.get(label)
        if desc:
            tokens = tokens + tokenize_label(desc)[:max_desc_tokens]
    return tokens


def make_partial_fact(
    triple: Sequence[int],
    kind: Kind | str,
    store: KgStore,
    use_descriptions: bool = False,
    max_desc_tokens: int = DEFAULT_MAX_DESC_TOKENS,
) -> PartialFact:
    kind = Kind(kind)
    h, r, t = (int(x) for x in triple)
    tokens: list[str] = []
    if kind in (Kind.HT, Kind.HRT):
        tokens += _entity_tokens(store, h, use_descriptions, max_desc_tokens)
    if kind in (Kind.RT, Kind.HRT):
        rel = store.relations.label(r)
        tokens += tokenize_label(rel) or [rel]
    tokens += _entity_tokens(store, t, use_descriptions, max_desc_tokens)
    return PartialFact(kind, tuple(tokens), (h, r, t))


class TokenVocab:
    """Token <-> id mapping with reserved PAD (0) and OOV (1) ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = []
        self._ids: dict[str, int] = {}
        for tok in tokens:
            if tok not in self._ids:
                self._ids[tok] = len(self._tokens) + N_RESERVED
                self._tokens.append(tok)

    @classmethod
    def from_store(
        cls,
        store: KgStore,
        use_descriptions: bool = False,
        max_desc_tokens: int = DEFAULT_MAX_DESC_TOKENS,
    ) -> "TokenVocab":
        """Vocabulary over the partial facts of the train split only."""
        tokens: list[str] = []
        for triple in store.train.tolist():
            tokens += make_partial_fact(triple, Kind.HRT, store, use_descriptions, max_desc_tokens).tokens
        return cls(tokens)

    def __len__(self) -> int:
        """Total id space, reserved ids included."""
        return len(self._tokens) + N_RESERVED

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, OOV_ID)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self._tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenVocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text else [])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TokenVocab) and self._tokens == other._tokens


def encode_tokens(pf: PartialFact | Sequence[str], vocab: TokenVocab, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> np.ndarray:
    tokens = pf.tokens if isinstance(pf, PartialFact) else tuple(pf)
    if not tokens:
        raise ValueError("cannot encode an empty partial fact")
    return np.fromiter((vocab.id(tok) for tok in tokens[:max_seq_len]), dtype=np.int64)


def pad_batch(sequences: Sequence[np.ndarray]) -> np.ndarray:
    """Right-pad id sequences with PAD into a ``(batch, max_len)`` array."""
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(sequences):
        out[i, : len(seq)] = seq
    return out
