"""Whole-word frequency vocabulary and caption tokenisation."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from flavars.encoders import TokenSequence
from flavars.errors import DataError
from flavars.masking import CLS_ID, PAD_ID, SEP_ID, UNK_ID

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, and keep each punctuation mark as its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps({"fingerprint": self.fingerprint, "tokens": self.tokens}, indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        vocab = cls(list(data["tokens"]))
        if data.get("fingerprint", vocab.fingerprint) != vocab.fingerprint:
            raise DataError(f"vocabulary fingerprint mismatch in {path}")
        return vocab


def build_vocab(captions: Iterable[str], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 5`` most frequent words, ties broken lexicographically."""
    captions = list(captions)
    if not captions:
        raise DataError("cannot build a vocabulary from an empty corpus")
    if max_size < len(SPECIALS):
        raise DataError(f"max_size must be >= {len(SPECIALS)}")
    counts = Counter(tok for text in captions for tok in split_words(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [tok for tok, _ in ranked[: max_size - len(SPECIALS)]]
    return Vocabulary(list(SPECIALS) + words)


def tokenize(caption: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 2:
        raise DataError("max_len must be >= 2")
    body = [vocab.id(tok) for tok in split_words(caption)][: max_len - 2]
    ids = [CLS_ID, *body, SEP_ID]
    n_pad = max_len - len(ids)
    return TokenSequence(tuple(ids + [PAD_ID] * n_pad), tuple([False] * len(ids) + [True] * n_pad))
