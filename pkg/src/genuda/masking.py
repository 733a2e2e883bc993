"""Word-class PMI statistics and masking strategies.

PMI is counted per word *token* over lowercased whitespace words with
trailing punctuation stripped (the same peel rule the tokenizer applies),
so "fun." and "Fun" count as one type.  Word sets derived from the table
drive selective masking during training and the blank-out perturbation at
inference.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Corpus, CorpusError
from .tokenizer import BLANK

_TRAILING_PUNCT = ".,!?;:"


class MaskingError(ValueError):
    """Empty statistics or an unusable strategy configuration."""


def word_key(word: str) -> str:
    """Identity used for counting and set membership."""
    word = word.lower()
    stripped = word.rstrip(_TRAILING_PUNCT)
    return stripped if stripped else word


@dataclass(frozen=True)
class PmiTable:
    """log p(word, class) / (p(word) p(class)) over per-token counts."""

    pmi: dict[tuple[str, int], float]
    word_counts: dict[str, int]
    class_counts: dict[int, int]   # word tokens inside class-c sentences
    total_tokens: int
    pair_counts: dict[tuple[str, int], int]

    def words(self) -> list[str]:
        return sorted(self.word_counts)

    def score(self, word: str) -> float:
        """Informativeness: max PMI over the classes the word was seen with."""
        values = [v for (w, _), v in self.pmi.items() if w == word]
        if not values:
            raise MaskingError(f"word {word!r} not in table")
        return max(values)


def compute_pmi(source_labeled: Corpus) -> PmiTable:
    """Count word/class co-occurrences on a labeled corpus.

    Zero-count (word, class) pairs are omitted rather than stored as -inf;
    ``score`` maxes over observed classes only.
    """
    if len(source_labeled) == 0:
        raise CorpusError("cannot compute PMI on an empty corpus")
    labels = source_labeled.labels
    pair_counts: Counter[tuple[str, int]] = Counter()
    word_counts: Counter[str] = Counter()
    class_counts: Counter[int] = Counter()
    for ex, y in zip(source_labeled, labels):
        for word in ex.text.split():
            key = word_key(word)
            pair_counts[(key, y)] += 1
            word_counts[key] += 1
            class_counts[y] += 1
    total = sum(word_counts.values())
    pmi = {}
    for (word, y), c_wy in pair_counts.items():
        # log( (c_wy/N) / ((c_w/N)(c_y/N)) ) = log(c_wy * N / (c_w * c_y))
        pmi[(word, y)] = math.log(c_wy * total / (word_counts[word] * class_counts[y]))
    return PmiTable(pmi, dict(word_counts), dict(class_counts), total,
                    dict(pair_counts))


@dataclass(frozen=True)
class WordSets:
    """Top-k% (informative) and bottom-k% (uninformative) scored words."""

    informative: frozenset[str]
    uninformative: frozenset[str]
    k_percent: float = 15.0
    min_freq: int = 10


def select_word_sets(table: PmiTable, k_percent: float = 15.0,
                     min_freq: int = 10) -> WordSets:
    """Rank surviving words by max-over-class PMI and slice both tails.

    Words seen fewer than ``min_freq`` times are filtered out first; both
    sets take ceil(k% * n) of the n survivors, ties broken lexicographically.
    """
    if not table.pmi:
        raise MaskingError("PMI table is empty")
    survivors = [w for w, c in table.word_counts.items() if c >= min_freq]
    if not survivors:
        raise MaskingError(f"no words with frequency >= {min_freq}")
    ranked = sorted(survivors, key=lambda w: (-table.score(w), w))
    take = math.ceil(k_percent / 100.0 * len(ranked))
    informative = frozenset(ranked[:take])
    uninformative = frozenset(ranked[len(ranked) - take:])
    return WordSets(informative, uninformative, k_percent, min_freq)


@dataclass(frozen=True)
class MaskPlan:
    """Masked word positions over one whitespace word sequence."""

    positions: frozenset[int]
    n_words: int

    def __post_init__(self):
        if not self.positions:
            raise MaskingError("mask plan is empty")
        if len(self.positions) >= self.n_words:
            raise MaskingError("mask plan covers the whole sequence")
        if not all(0 <= i < self.n_words for i in self.positions):
            raise MaskingError("mask position out of range")


@dataclass(frozen=True)
class MaskStrategy:
    """Random rate-p masking or selective masking against a word set."""

    kind: str = "random"                       # random | informative | uninformative
    rate: float = 0.15
    word_sets: WordSets | None = None
    selective_cap: float = 0.15                # fraction of words per sentence

    def __post_init__(self):
        if self.kind not in ("random", "informative", "uninformative"):
            raise MaskingError(f"unknown mask strategy {self.kind!r}")
        if not 0.0 < self.rate < 1.0:
            raise MaskingError("mask rate must lie strictly inside (0, 1)")
        if self.kind != "random" and self.word_sets is None:
            raise MaskingError(f"{self.kind} masking needs word sets")

    def member_set(self) -> frozenset[str]:
        return (self.word_sets.informative if self.kind == "informative"
                else self.word_sets.uninformative)


def plan_masks(words, strategy: MaskStrategy, rng) -> MaskPlan:
    """Choose masked positions for one sentence.

    Random: independent Bernoulli(rate) per word, whole plan resampled while
    empty or full.  Selective: mask the set members, at most
    ceil(cap * n_words) of them (chosen by rng when more qualify), falling
    back to Random(0.15) when the sentence has no member.
    """
    words = list(words)
    n = len(words)
    if n < 2:
        raise MaskingError("need at least 2 words to mask")
    if strategy.kind == "random":
        return _random_plan(n, strategy.rate, rng)
    members = [i for i, w in enumerate(words) if word_key(w) in strategy.member_set()]
    if not members:
        return _random_plan(n, 0.15, rng)
    cap = math.ceil(strategy.selective_cap * n)
    if len(members) > cap:
        chosen = rng.choice(len(members), size=cap, replace=False)
        members = [members[i] for i in sorted(chosen)]
    if len(members) >= n:   # cap cannot exceed n-1 for n >= 2, keep plan partial
        members = members[: n - 1]
    return MaskPlan(frozenset(members), n)


def _random_plan(n: int, rate: float, rng) -> MaskPlan:
    while True:
        mask = rng.random(n) < rate
        if mask.any() and not mask.all():
            return MaskPlan(frozenset(int(i) for i in mask.nonzero()[0]), n)


def mask_at_inference(words, word_sets: WordSets, mode: str) -> list[str]:
    """Blank every set-member word; a pure input perturbation."""
    if mode not in ("informative", "uninformative"):
        raise MaskingError(f"unknown inference masking mode {mode!r}")
    member = word_sets.informative if mode == "informative" else word_sets.uninformative
    return [BLANK if word_key(w) in member else w for w in words]
