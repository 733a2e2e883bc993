"""Prompt templates: masking, causal LM and classification text pairs.

A masking template turns a word sequence plus a mask plan into an
instruction-prefixed blanked sentence and a separator-delimited span
string.  A classification template wraps a sentence into a question whose
answer is a per-class label string; ``deverbalize`` maps that string back
to the class index after inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .corpus import LabelSpace
from .kvconfig import ConfigError, get_str

DEFAULT_MLM_INSTRUCTION = "Fill in the blanks:"
DEFAULT_CLS_PATTERN = "{x} Is this sentence positive or negative?"


class TemplateError(ValueError):
    """Mask plan or template arguments violate the template contract."""


class DeverbalizeError(ValueError):
    """A generated label string matches no verbalization."""


@dataclass(frozen=True)
class TemplatePair:
    """An input-output text pair the autoregressive model trains on."""

    input_text: str
    output_text: str


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction and pattern strings for one task setup."""

    kind: str = "mlm"
    instruction: str = DEFAULT_MLM_INSTRUCTION
    cls_pattern: str = DEFAULT_CLS_PATTERN
    verbalizer: tuple[str, ...] = ("Negative", "Positive")

    def __post_init__(self):
        if self.kind not in ("mlm", "clm", "cls"):
            raise ConfigError(f"unknown template kind {self.kind!r}")
        if self.cls_pattern.count("{x}") != 1:
            raise ConfigError("cls_pattern must contain {x} exactly once")
        if len(set(self.verbalizer)) != len(self.verbalizer):
            raise ConfigError("verbalizer strings must be distinct")

    @classmethod
    def for_label_space(cls, space: LabelSpace, kind: str = "mlm",
                        instruction: str = DEFAULT_MLM_INSTRUCTION,
                        cls_pattern: str = DEFAULT_CLS_PATTERN) -> "PromptTemplate":
        return cls(kind, instruction, cls_pattern, tuple(space.verbalizations))

    @classmethod
    def from_kv(cls, items: dict[str, str], space: LabelSpace) -> "PromptTemplate":
        verbalizer = tuple(
            items.get(f"verbalizer.{name}", space.verbalizations[i])
            for i, name in enumerate(space.class_names))
        return cls(kind=get_str(items, "kind", "mlm"),
                   instruction=get_str(items, "instruction", DEFAULT_MLM_INSTRUCTION),
                   cls_pattern=get_str(items, "cls_pattern", DEFAULT_CLS_PATTERN),
                   verbalizer=verbalizer)


def masked_runs(n_words: int, masked: set[int]) -> list[tuple[int, int]]:
    """Maximal runs of adjacent masked positions as [start, end) pairs."""
    runs = []
    i = 0
    while i < n_words:
        if i in masked:
            j = i
            while j < n_words and j in masked:
                j += 1
            runs.append((i, j))
            i = j
        else:
            i += 1
    return runs


def mlm_template(words, mask_plan, template: PromptTemplate) -> TemplatePair:
    """Blank each masked run with "_" and emit the spans between "<sep>"s."""
    words = list(words)
    masked = set(mask_plan.positions) if hasattr(mask_plan, "positions") else set(mask_plan)
    if not masked:
        raise TemplateError("mask plan is empty")
    if not all(0 <= i < len(words) for i in masked):
        raise TemplateError("mask plan indexes outside the word sequence")
    if len(masked) == len(words):
        raise TemplateError("mask plan covers the whole sequence")
    runs = masked_runs(len(words), masked)
    blanked = []
    cursor = 0
    for start, end in runs:
        blanked.extend(words[cursor:start])
        blanked.append("_")
        cursor = end
    blanked.extend(words[cursor:])
    spans = [" ".join(words[start:end]) for start, end in runs]
    input_text = template.instruction + " " + " ".join(blanked)
    output_text = "<sep> " + " <sep> ".join(spans) + " <sep>"
    return TemplatePair(input_text, output_text)


def clm_template(text: str) -> TemplatePair:
    """Next-word prediction: input is the text verbatim, targets shift by one."""
    words = text.split()
    if not words:
        raise TemplateError("cannot build a CLM pair from empty text")
    return TemplatePair(text, " ".join(words[1:] + ["<eos>"]))


def cls_template(x: str, y: int, template: PromptTemplate) -> TemplatePair:
    """Substitute the sentence into the question pattern; answer is the label string."""
    if not 0 <= y < len(template.verbalizer):
        raise TemplateError(f"class index {y} outside the verbalizer")
    return TemplatePair(template.cls_pattern.replace("{x}", x),
                        template.verbalizer[y])


def deverbalize(label_string: str, label_space: LabelSpace) -> int:
    """Map a label string back to its class index (case-folded, trimmed)."""
    needle = label_string.strip().casefold()
    for idx, verb in enumerate(label_space.verbalizations):
        if verb.casefold() == needle:
            return idx
    raise DeverbalizeError(f"label string {label_string!r} matches no verbalization")
