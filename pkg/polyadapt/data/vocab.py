"""Shared character-level vocabulary with per-language tag tokens."""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Iterable

from ..errors import DataError

PAD, EOS, MASK = 0, 1, 2
SPECIALS = ("<pad>", "<eos>", "<mask>")

# Space, Latin letters, digits, punctuation, Latin-1 lowercase and Greek lowercase.
CHARSET = (
    " "
    + string.ascii_lowercase
    + string.digits
    + ".,'-?!"
    + "àáâãäåæçèéêëìíîïðñòóôõöøùúûüýþÿß"
    + "αβγδεζηθικλμνξοπρστυφχψω"
)
LETTERS = tuple(c for c in CHARSET if c.isalpha())


def language_tag(index: int) -> str:
    return f"l{index}"


def vocabulary_size(num_languages: int) -> int:
    return len(SPECIALS) + num_languages + len(CHARSET)


@dataclass
class Vocabulary:
    """Token ids: specials first, then one tag per language, then characters."""

    num_languages: int
    tokens: list[str] = field(init=False)
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        tags = [f"<{language_tag(i)}>" for i in range(self.num_languages)]
        self.tokens = list(SPECIALS) + tags + list(CHARSET)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.char_offset = len(SPECIALS) + self.num_languages

    def __len__(self) -> int:
        return len(self.tokens)

    def tag_id(self, lang: int) -> int:
        if not 0 <= lang < self.num_languages:
            raise DataError(f"language {lang} has no tag token (vocabulary has {self.num_languages} languages)")
        return len(SPECIALS) + lang

    def encode_target(self, text: str, lang: int) -> list[int]:
        """Target sequence: language tag, characters, end token."""
        return [self.tag_id(lang)] + tokenize(text, self) + [EOS]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    unknown = sorted({c for c in text if c not in vocab.index or vocab.index[c] < vocab.char_offset})
    if unknown:
        raise DataError(f"characters not in vocabulary: {unknown!r}")
    return [vocab.index[c] for c in text]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Characters of ``ids``; specials and language tags are dropped."""
    return "".join(vocab.tokens[i] for i in ids if i >= vocab.char_offset)
