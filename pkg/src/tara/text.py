"""Minimal prompt model: fixed vocabulary, concept bindings, embedding lookup.

Embeddings are random Gaussian stand-ins for a frozen text encoder. The
downstream mechanism only cares about token positions and linear maps of
the embedding columns, so nothing semantic is needed; what matters is that
the table is deterministic, frozen, and cheap to regenerate from its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Matrix
from .seeding import TAG_VOCAB, rng_stream

BOS_ID = 0
EOS_ID = 1
BOS_WORD = "[BOS]"
EOS_WORD = "[EOS]"


class TextError(ValueError):
    """Invalid vocabulary input or unknown token."""


@dataclass(frozen=True, slots=True)
class Vocabulary:
    """Frozen token table. Ids are dense; 0 and 1 are BOS and EOS."""

    d: int
    seed: int
    words: tuple[str, ...]
    entries: dict[str, int] = field(repr=False)
    table: Matrix = field(repr=False)  # |vocab| x d, row i = embedding of id i

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, word: str) -> int:
        try:
            return self.entries[word]
        except KeyError:
            raise TextError(f"unknown token {word!r}") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.entries):
            raise TextError(f"token id {token_id} out of range")
        if token_id == BOS_ID:
            return BOS_WORD
        if token_id == EOS_ID:
            return EOS_WORD
        return self.words[token_id - 2]

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.token_of(i) for i in ids)

    def embedding(self, token_id: int) -> Matrix:
        """Embedding of one token as a d x 1 column."""
        self.token_of(token_id)  # range check
        return Matrix(self.table.array[token_id : token_id + 1, :].T)

    def to_json(self) -> str:
        return json.dumps({"d": self.d, "seed": self.seed, "words": list(self.words)})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        return build_vocab(doc["seed"], doc["d"], doc["words"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


def build_vocab(seed: int, d: int, words) -> Vocabulary:
    """Vocabulary over `words` plus BOS/EOS, embeddings i.i.d. N(0, 1/d)."""
    words = tuple(words)
    if d < 4:
        raise TextError(f"embedding width must be at least 4, got {d}")
    if not words:
        raise TextError("word list is empty")
    if len(set(words)) != len(words):
        dupes = sorted({w for w in words if words.count(w) > 1})
        raise TextError(f"duplicate words: {dupes}")
    if BOS_WORD in words or EOS_WORD in words:
        raise TextError("reserved token string in word list")

    rng = rng_stream(seed, TAG_VOCAB)
    table = Matrix(rng.normal(0.0, d**-0.5, size=(2 + len(words), d)))
    entries = {BOS_WORD: BOS_ID, EOS_WORD: EOS_ID}
    for i, w in enumerate(words):
        entries[w] = 2 + i
    return Vocabulary(d=d, seed=int(seed), words=words, entries=entries, table=table)


@dataclass(frozen=True, slots=True)
class ConceptBinding:
    """Pairs a rare identifier token with the class token it rides on."""

    concept: str
    rare_token: int
    class_token: int

    def __post_init__(self):
        if self.rare_token in (BOS_ID, EOS_ID):
            raise TextError("rare token collides with a reserved id")
        if self.rare_token == self.class_token:
            raise TextError("rare token equals class token")


@dataclass(frozen=True, slots=True)
class TokenSequence:
    """An encoded prompt: ids, the d x n conditioning matrix, concept positions."""

    ids: tuple[int, ...]
    X: Matrix
    rare_positions: dict[str, frozenset[int]]
    class_positions: dict[str, frozenset[int]]

    @property
    def n(self) -> int:
        return len(self.ids)

    def rare_positions_of(self, concept: str) -> frozenset[int]:
        return self.rare_positions.get(concept, frozenset())

    def class_positions_of(self, concept: str) -> frozenset[int]:
        return self.class_positions.get(concept, frozenset())


def encode_prompt(vocab: Vocabulary, bindings, prompt) -> TokenSequence:
    """BOS + prompt tokens + EOS, with per-concept rare/class position maps.

    `prompt` is a sequence of token strings already split by the caller.
    """
    bindings = tuple(bindings)
    seen_rare: dict[int, str] = {}
    for b in bindings:
        if b.rare_token in seen_rare and seen_rare[b.rare_token] != b.concept:
            raise TextError(
                f"rare token id {b.rare_token} bound to both "
                f"{seen_rare[b.rare_token]!r} and {b.concept!r}"
            )
        seen_rare[b.rare_token] = b.concept

    ids = [BOS_ID] + [vocab.id_of(w) for w in prompt] + [EOS_ID]
    cols = vocab.table.array[ids].T
    x = Matrix(np.ascontiguousarray(cols))

    rare: dict[str, frozenset[int]] = {}
    klass: dict[str, frozenset[int]] = {}
    for b in bindings:
        rp = frozenset(j for j, t in enumerate(ids) if t == b.rare_token)
        cp = frozenset(j for j, t in enumerate(ids) if t == b.class_token)
        if rp:
            rare[b.concept] = rp
        if cp:
            klass[b.concept] = cp
    return TokenSequence(ids=tuple(ids), X=x, rare_positions=rare, class_positions=klass)
