"""Labeled-source / unlabeled-target corpora: ingestion, synthesis, splits.

Target-domain labels are never visible on the training path.  They ride
along in a hidden field and are only reachable through
``evaluation_labels``, which counts its own invocations so tests can prove
no training schedule peeked.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kvconfig import ConfigError, get_float, get_int, get_str
from .seeding import stream_rng

# Incremented on every hidden-label access; see evaluation_labels().
_GATED_LABEL_ACCESSES = 0


class CorpusError(ValueError):
    """Malformed corpus file or record."""


class LabelError(CorpusError):
    """A record's label is not part of the label space."""


@dataclass(frozen=True)
class Example:
    """One text with an optional class index."""

    text: str
    label: int | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError("example text is empty")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names plus the label strings the model emits."""

    class_names: tuple[str, ...]
    verbalizations: tuple[str, ...]

    def __post_init__(self):
        k = len(self.class_names)
        if k < 2:
            raise ConfigError("label space needs at least 2 classes")
        if len(set(self.class_names)) != k:
            raise ConfigError("class names must be unique")
        if len(self.verbalizations) != k:
            raise ConfigError("one verbalization per class required")
        if len(set(self.verbalizations)) != k or any(not v for v in self.verbalizations):
            raise ConfigError("verbalizations must be unique and non-empty")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def parse_label(self, raw: str) -> int:
        """Resolve a file label (index, class name or verbalization)."""
        raw = raw.strip()
        if raw.lstrip("-").isdigit():
            idx = int(raw)
            if 0 <= idx < self.num_classes:
                return idx
            raise LabelError(f"label index {idx} out of range 0..{self.num_classes - 1}")
        for names in (self.class_names, self.verbalizations):
            if raw in names:
                return names.index(raw)
        raise LabelError(f"unknown label string {raw!r}")


BINARY_SENTIMENT = LabelSpace(("Negative", "Positive"), ("Negative", "Positive"))


class Corpus:
    """Immutable sequence of Examples, optionally with hidden eval labels."""

    def __init__(self, examples, label_space: LabelSpace | None = None,
                 hidden_labels: tuple[int, ...] | None = None):
        self.examples: tuple[Example, ...] = tuple(examples)
        self.label_space = label_space
        self._hidden_labels = hidden_labels
        if hidden_labels is not None and len(hidden_labels) != len(self.examples):
            raise CorpusError("hidden label count does not match corpus size")
        if label_space is not None:
            for ex in self.examples:
                if ex.label is not None and ex.label >= label_space.num_classes:
                    raise LabelError(f"label {ex.label} out of range")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i) -> Example:
        return self.examples[i]

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(ex.text for ex in self.examples)

    @property
    def labels(self) -> tuple[int, ...]:
        """Visible labels; raises if any example is unlabeled."""
        if any(ex.label is None for ex in self.examples):
            raise CorpusError("corpus has unlabeled examples")
        return tuple(ex.label for ex in self.examples)

    def is_labeled(self) -> bool:
        return all(ex.label is not None for ex in self.examples)

    def unlabeled(self) -> "Corpus":
        """Projection that drops labels (and any hidden labels)."""
        return Corpus((Example(ex.text) for ex in self.examples), self.label_space)

    def hide_labels(self) -> "Corpus":
        """Move visible labels into the evaluation-only hidden field."""
        return Corpus((Example(ex.text) for ex in self.examples),
                      self.label_space, hidden_labels=self.labels)

    def subset(self, indices) -> "Corpus":
        hidden = None
        if self._hidden_labels is not None:
            hidden = tuple(self._hidden_labels[i] for i in indices)
        return Corpus((self.examples[i] for i in indices), self.label_space, hidden)


def evaluation_labels(corpus: Corpus) -> tuple[int, ...]:
    """Labels for scoring only.

    Visible labels pass straight through; hidden (target-domain) labels
    increment the gated-access counter that the training-path tests probe.
    """
    global _GATED_LABEL_ACCESSES
    if corpus.is_labeled():
        return corpus.labels
    if corpus._hidden_labels is None:
        raise CorpusError("corpus has no labels, hidden or visible")
    _GATED_LABEL_ACCESSES += 1
    return corpus._hidden_labels


def labeled_view_for_evaluation(corpus: Corpus) -> Corpus:
    """A labeled copy built through the evaluation gate (Src+Tgt, analyses)."""
    labels = evaluation_labels(corpus)
    return Corpus((Example(ex.text, y) for ex, y in zip(corpus.examples, labels)),
                  corpus.label_space)


def gated_label_access_count() -> int:
    return _GATED_LABEL_ACCESSES


def reset_gated_label_access_count() -> None:
    global _GATED_LABEL_ACCESSES
    _GATED_LABEL_ACCESSES = 0


@dataclass(frozen=True)
class SplitCorpora:
    """Train/val/test views of one domain."""

    train: Corpus
    val: Corpus
    test: Corpus

    def split(self, name: str) -> Corpus:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class DomainPair:
    """A labeled source domain and a label-hidden target domain."""

    source: SplitCorpora
    target: SplitCorpora
    label_space: LabelSpace
    name: str = "SRC→TGT"


@dataclass(frozen=True)
class SplitSpec:
    """Per-domain split sizes and the seed that shuffles them."""

    train: int
    val: int
    test: int
    seed: int = 0


def split_corpus(corpus: Corpus, spec: SplitSpec) -> SplitCorpora:
    """Disjoint shuffled splits; deterministic in the spec seed."""
    total = spec.train + spec.val + spec.test
    if total > len(corpus):
        raise CorpusError(f"splits need {total} examples, corpus has {len(corpus)}")
    order = stream_rng(spec.seed, "split").permutation(len(corpus))
    a, b = spec.train, spec.train + spec.val
    return SplitCorpora(corpus.subset(order[:a]),
                        corpus.subset(order[a:b]),
                        corpus.subset(order[b:total]))


# ---------------------------------------------------------------- file I/O

def load_corpus(path, format: str, label_space: LabelSpace,
                labeled: bool = True) -> Corpus:
    """Load TSV (``text<TAB>label``) or JSONL records in file order."""
    if format not in ("tsv", "jsonl"):
        raise ConfigError(f"unknown corpus format {format!r}")
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                text, raw_label = _parse_record(line, format)
            except LabelError:
                raise
            except Exception as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
            label = None
            if labeled and raw_label is not None:
                try:
                    label = label_space.parse_label(raw_label)
                except LabelError as exc:
                    raise LabelError(f"{path}: line {lineno}: {exc}") from exc
            examples.append(Example(text, label))
    return Corpus(examples, label_space)


def _parse_record(line: str, format: str) -> tuple[str, str | None]:
    if format == "tsv":
        parts = line.split("\t")
        if len(parts) == 1:
            return parts[0], None
        if len(parts) == 2:
            return parts[0], parts[1]
        raise CorpusError(f"expected 1 or 2 tab-separated fields, got {len(parts)}")
    record = json.loads(line)
    if "text" not in record:
        raise CorpusError("record has no 'text' field")
    label = record.get("label")
    return record["text"], None if label is None else str(label)


def save_corpus(corpus: Corpus, path, format: str) -> None:
    """Canonical serialization; load_corpus round-trips it byte-identically."""
    if format not in ("tsv", "jsonl"):
        raise ConfigError(f"unknown corpus format {format!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            if format == "tsv":
                fh.write(ex.text if ex.label is None else f"{ex.text}\t{ex.label}")
            else:
                record = {"text": ex.text}
                if ex.label is not None:
                    record["label"] = corpus.label_space.class_names[ex.label] \
                        if corpus.label_space else str(ex.label)
                fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


# ------------------------------------------------------------- subsampling

def kshot_subsample(corpus: Corpus, k: int, seed: int) -> Corpus:
    """Class-balanced k-example sample: floor(k/K) per class, remainder to
    the lowest class indices, order reshuffled deterministically."""
    if not corpus.is_labeled():
        raise CorpusError("k-shot subsampling needs a labeled corpus")
    if k > len(corpus):
        raise CorpusError(f"k={k} exceeds corpus size {len(corpus)}")
    num_classes = corpus.label_space.num_classes
    if k < num_classes:
        raise CorpusError(f"k={k} cannot cover {num_classes} classes")
    base, remainder = divmod(k, num_classes)
    per_class = [base + (1 if c < remainder else 0) for c in range(num_classes)]
    rng = stream_rng(seed, "kshot")
    chosen: list[int] = []
    for c in range(num_classes):
        pool = [i for i, ex in enumerate(corpus) if ex.label == c]
        if per_class[c] > len(pool):
            raise CorpusError(f"class {c} has {len(pool)} examples, need {per_class[c]}")
        idx = rng.choice(len(pool), size=per_class[c], replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    order = rng.permutation(len(chosen))
    return corpus.subset([chosen[i] for i in order])


# --------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the two-domain binary-sentiment generator.

    Each sentence mixes background words of its domain with 1..n words
    drawn from the domain's class-specific sentiment vocabulary.  The
    ``overlap`` knob sets the fraction of each domain's sentiment
    vocabulary that is shared with the other domain.
    """

    background_size: int = 200
    background_shared: float = 0.5
    informative_per_class: int = 16
    overlap: float = 0.3
    shared_boost: float = 1.0      # sampling weight of cross-domain sentiment words
    shared_tilt: float = 1.0       # frequency shift of the shared sentiment words:
                                   # weight /tilt in source sentences, *tilt in target
    jargon_rate: float = 0.0       # fraction of sentences drawing only domain-specific
                                   # sentiment words
    train_size: int = 1000
    val_size: int = 100
    test_size: int = 200
    sentence_len_min: int = 6
    sentence_len_max: int = 10
    informative_min: int = 1
    informative_max: int = 3
    positive_prior: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.background_size < 1 or self.informative_per_class < 1:
            raise ConfigError("vocabulary sizes must be positive")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError("overlap must lie in [0, 1]")
        if self.shared_boost <= 0 or self.shared_tilt <= 0:
            raise ConfigError("shared_boost and shared_tilt must be positive")
        if not 0.0 <= self.jargon_rate <= 1.0:
            raise ConfigError("jargon_rate must lie in [0, 1]")
        if self.sentence_len_min < 2 or self.sentence_len_max < self.sentence_len_min:
            raise ConfigError("invalid sentence length range")
        if self.informative_min < 1 or self.informative_max < self.informative_min:
            raise ConfigError("invalid informative-words range")

    @classmethod
    def desk_study(cls, overlap: float = 0.3, seed: int = 0) -> "SynthSpec":
        """The pair used by the desk-scale directional studies.

        Short sentences dominated by sentiment words make the class
        structure learnable within the 2000-step phase budget.  The shared
        sentiment vocabulary is frequency-shifted (rare in source text,
        dominant in target text) and a jargon fraction writes some target
        sentences entirely in domain-specific words, so target accuracy
        separates cleanly by how much of the pair a method has read.
        """
        return cls(background_size=40, background_shared=0.5,
                   informative_per_class=8, overlap=overlap,
                   shared_tilt=6.0, jargon_rate=0.15,
                   informative_min=4, informative_max=6,
                   sentence_len_min=5, sentence_len_max=7, seed=seed)

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        for key in items:
            if key not in known:
                raise ConfigError(f"unknown synth key {key!r}")
        return cls(
            background_size=get_int(items, "background_size", cls.background_size),
            background_shared=get_float(items, "background_shared", cls.background_shared),
            informative_per_class=get_int(items, "informative_per_class",
                                          cls.informative_per_class),
            overlap=get_float(items, "overlap", cls.overlap),
            shared_boost=get_float(items, "shared_boost", cls.shared_boost),
            shared_tilt=get_float(items, "shared_tilt", cls.shared_tilt),
            jargon_rate=get_float(items, "jargon_rate", cls.jargon_rate),
            train_size=get_int(items, "train_size", cls.train_size),
            val_size=get_int(items, "val_size", cls.val_size),
            test_size=get_int(items, "test_size", cls.test_size),
            sentence_len_min=get_int(items, "sentence_len_min", cls.sentence_len_min),
            sentence_len_max=get_int(items, "sentence_len_max", cls.sentence_len_max),
            informative_min=get_int(items, "informative_min", cls.informative_min),
            informative_max=get_int(items, "informative_max", cls.informative_max),
            positive_prior=get_float(items, "positive_prior", cls.positive_prior),
            seed=get_int(items, "seed", cls.seed),
        )


_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "gl", "kr", "pl", "st", "tr", "sn")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


def _make_words(rng, count: int, taken: set[str], syllables=(2, 3)) -> list[str]:
    """Pronounceable unique pseudo-words, deterministic in the rng state."""
    words = []
    while len(words) < count:
        n = int(rng.integers(syllables[0], syllables[-1] + 1))
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))]
                       + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


@dataclass(frozen=True)
class SynthVocab:
    """The planted word lists behind a generated pair (for analyses/tests)."""

    background: dict[str, tuple[str, ...]]            # domain -> words
    informative: dict[tuple[str, int], tuple[str, ...]]  # (domain, class) -> words


def synth_planted_vocab(spec: SynthSpec) -> SynthVocab:
    """The word pools synth_generate will use, without generating sentences."""
    rng = stream_rng(spec.seed, "synth", "vocab")
    taken: set[str] = set()
    n_shared_bg = int(round(spec.background_size * spec.background_shared))
    shared_bg = _make_words(rng, n_shared_bg, taken)
    bg = {}
    for domain in ("src", "tgt"):
        own = _make_words(rng, spec.background_size - n_shared_bg, taken)
        bg[domain] = tuple(shared_bg + own)
    n_shared_inf = int(round(spec.informative_per_class * spec.overlap))
    informative = {}
    for cls in (0, 1):
        shared = _make_words(rng, n_shared_inf, taken)
        for domain in ("src", "tgt"):
            own = _make_words(rng, spec.informative_per_class - n_shared_inf, taken)
            informative[(domain, cls)] = tuple(shared + own)
    return SynthVocab(bg, informative)


def synth_generate(spec: SynthSpec, seed: int | None = None) -> DomainPair:
    """Generate a two-domain binary-sentiment pair, deterministic in seed."""
    if seed is None:
        seed = spec.seed
    spec = SynthSpec(**{**spec.__dict__, "seed": seed})
    vocab = synth_planted_vocab(spec)
    sizes = {"train": spec.train_size, "val": spec.val_size, "test": spec.test_size}
    domains = {}
    for domain in ("src", "tgt"):
        splits = {}
        for split_name, size in sizes.items():
            rng = stream_rng(seed, "synth", domain, split_name)
            examples = [_synth_sentence(rng, spec, vocab, domain) for _ in range(size)]
            splits[split_name] = Corpus(examples, BINARY_SENTIMENT)
        domains[domain] = splits
    source = SplitCorpora(**{k: v for k, v in domains["src"].items()})
    target = SplitCorpora(**{k: v.hide_labels() for k, v in domains["tgt"].items()})
    return DomainPair(source, target, BINARY_SENTIMENT,
                      name=f"synthA→synthB(overlap={spec.overlap})")


def _synth_sentence(rng, spec: SynthSpec, vocab: SynthVocab, domain: str) -> Example:
    label = int(rng.random() < spec.positive_prior)
    length = int(rng.integers(spec.sentence_len_min, spec.sentence_len_max + 1))
    n_inf = int(rng.integers(spec.informative_min,
                             min(spec.informative_max, length - 1) + 1))
    inf_pool = vocab.informative[(domain, label)]
    # the leading round(overlap * size) pool entries are the cross-domain words
    n_shared = int(round(spec.informative_per_class * spec.overlap))
    shared_w = spec.shared_boost * (spec.shared_tilt if domain == "tgt"
                                    else 1.0 / spec.shared_tilt)
    if spec.jargon_rate > 0 and 0 < n_shared < len(inf_pool) \
            and rng.random() < spec.jargon_rate:
        # a pure-jargon sentence: only domain-specific sentiment words
        weights = np.array([0.0] * n_shared + [1.0] * (len(inf_pool) - n_shared))
    else:
        weights = np.array([shared_w] * n_shared
                           + [1.0] * (len(inf_pool) - n_shared))
    weights /= weights.sum()
    bg_pool = vocab.background[domain]
    words = [inf_pool[i] for i in rng.choice(len(inf_pool), size=n_inf, p=weights)]
    words += [bg_pool[i] for i in rng.integers(len(bg_pool), size=length - n_inf)]
    order = rng.permutation(length)
    return Example(" ".join(words[i] for i in order) + ".", label)


# --------------------------------------------------------- pair directories

PAIR_FILES = {("source", "train"): "source_train.tsv",
              ("source", "val"): "source_val.tsv",
              ("source", "test"): "source_test.tsv",
              ("target", "train"): "target_train.tsv",
              ("target", "val"): "target_val.tsv",
              ("target", "test"): "target_test.tsv"}


def save_pair_dir(pair: DomainPair, out_dir) -> None:
    """Write the six split TSVs plus a metadata JSON for a domain pair."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    for (domain, split_name), fname in PAIR_FILES.items():
        corpora = pair.source if domain == "source" else pair.target
        corpus = corpora.split(split_name)
        if domain == "target":
            corpus = labeled_view_for_evaluation(corpus)
        save_corpus(corpus, os.path.join(out_dir, fname), "tsv")
    meta = {"name": pair.name,
            "class_names": list(pair.label_space.class_names),
            "verbalizations": list(pair.label_space.verbalizations)}
    with open(os.path.join(out_dir, "pair.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pair_dir(pair_dir) -> DomainPair:
    """Load a pair directory written by save_pair_dir (or hand-assembled)."""
    import os
    with open(os.path.join(pair_dir, "pair.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    space = LabelSpace(tuple(meta["class_names"]), tuple(meta["verbalizations"]))
    loaded = {}
    for (domain, split_name), fname in PAIR_FILES.items():
        corpus = load_corpus(os.path.join(pair_dir, fname), "tsv", space)
        if domain == "target":
            corpus = corpus.hide_labels()
        loaded[(domain, split_name)] = corpus
    return DomainPair(
        SplitCorpora(loaded[("source", "train")], loaded[("source", "val")],
                     loaded[("source", "test")]),
        SplitCorpora(loaded[("target", "train")], loaded[("target", "val")],
                     loaded[("target", "test")]),
        space, name=meta.get("name", "SRC→TGT"))
