"""Deterministic word-level tokenization with a corpus-built vocabulary.

Normalization is fixed: lowercase, split on whitespace, peel trailing
punctuation (. , ! ? ; :) into standalone tokens.  Five special ids are
reserved at the bottom of the id space; raw text can never produce them
because their surface forms are escaped during normalization.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

PAD_ID = 0
UNK_ID = 1
EOS_ID = 2
SEP_ID = 3
BLANK_ID = 4

PAD, UNK, EOS, SEP, BLANK = "<pad>", "<unk>", "<eos>", "<sep>", "_"

SPECIAL_TOKENS = (PAD, UNK, EOS, SEP, BLANK)
_SPECIAL_IDS = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
_TRAILING_PUNCT = {".", ",", "!", "?", ";", ":"}


class VocabError(ValueError):
    """Invalid vocabulary configuration."""


def normalize(text: str, escape_specials: bool = True) -> list[str]:
    """Lowercase, whitespace-split, peel trailing punctuation.

    With ``escape_specials`` (the raw-text path), a word that collides with
    a special surface form is prefixed with a backslash so it becomes an
    ordinary token.  Template text passes ``False`` so ``<sep>``, ``<eos>``
    and ``_`` survive as-is.
    """
    tokens: list[str] = []
    for word in text.lower().split():
        tail: list[str] = []
        while len(word) > 1 and word[-1] in _TRAILING_PUNCT:
            tail.append(word[-1])
            word = word[:-1]
        tokens.append(word)
        tokens.extend(reversed(tail))
    if escape_specials:
        tokens = ["\\" + t if t in _SPECIAL_IDS else t for t in tokens]
    return tokens


@dataclass(frozen=True)
class Vocab:
    """Immutable token <-> id mapping with fixed special ids 0-4."""

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]

    def to_text(self) -> str:
        """One token per line; the 5 specials head the file in id order."""
        return "\n".join(self.id_to_token) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        tokens = text.splitlines()
        if tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise VocabError("vocab file does not start with the specials header")
        return cls._from_ordered(tokens[5:])

    @classmethod
    def _from_ordered(cls, words: list[str]) -> "Vocab":
        id_to_token = SPECIAL_TOKENS + tuple(words)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise VocabError("duplicate tokens in vocabulary")
        return cls(token_to_id, id_to_token)


def build_vocab(corpora, max_vocab: int = 4096, min_count: int = 1) -> Vocab:
    """Build a vocabulary from iterables of raw texts.

    Keeps the most frequent words up to ``max_vocab`` total ids (specials
    included), ties broken lexicographically; words seen fewer than
    ``min_count`` times map to UNK.
    """
    if max_vocab < 16:
        raise VocabError(f"max_vocab must be >= 16, got {max_vocab}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for corpus in corpora:
        for text in corpus:
            counts.update(normalize(text))
            n_texts += 1
    if n_texts == 0:
        raise VocabError("cannot build a vocabulary from empty corpora")
    eligible = [(tok, c) for tok, c in counts.items() if c >= min_count]
    eligible.sort(key=lambda tc: (-tc[1], tc[0]))
    keep = [tok for tok, _ in eligible[: max_vocab - len(SPECIAL_TOKENS)]]
    return Vocab._from_ordered(keep)


def encode(text: str, vocab: Vocab, max_seq_len: int = 64,
           keep_specials: bool = False) -> list[int]:
    """Token ids for ``text``, truncated to ``max_seq_len``.

    ``keep_specials=True`` is the template path: surfaces like ``<sep>``
    and ``_`` map to their reserved ids instead of being escaped.
    """
    tokens = normalize(text, escape_specials=not keep_specials)
    ids = []
    for tok in tokens:
        if keep_specials and tok in _SPECIAL_IDS:
            ids.append(_SPECIAL_IDS[tok])
        else:
            ids.append(vocab.id_of(tok))
    return ids[:max_seq_len]


def decode(ids, vocab: Vocab) -> str:
    """Space-joined surface forms; inverse of encode on the normalized stream."""
    return " ".join(vocab.token_of(i) for i in ids)
