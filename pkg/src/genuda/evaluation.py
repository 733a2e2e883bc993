"""Rank classification, accuracy reports, embedding export, significance tests.

Classification scores each candidate label string by its mean per-token
log-probability (length normalization) and predicts the argmax, ties going
to the lowest class index.  Target-domain labels are only touched through
the evaluation gate.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from . import autograd as ag
from .corpus import Corpus, DomainPair, LabelSpace, evaluation_labels
from .masking import WordSets, mask_at_inference
from .model import ModelState, forward, make_batch, nll_loss
from .templating import PromptTemplate, cls_template
from .training import encode_pair

_EVAL_BATCH = 32


@dataclass(frozen=True)
class DomainReport:
    domain: str
    split: str
    accuracy: float
    n: int
    predictions: tuple[int, ...]

    def to_json_dict(self, seed=None, config_hash=None, with_predictions=True):
        out = {"domain": self.domain, "split": self.split,
               "accuracy": self.accuracy, "n": self.n,
               "seed": seed, "config_hash": config_hash}
        if with_predictions:
            out["predictions"] = list(self.predictions)
        return out


@dataclass(frozen=True)
class EvalReport:
    """Per-domain accuracies for one model on one split."""

    pair_name: str
    split: str
    domains: dict[str, DomainReport]
    seed: int | None = None
    config_hash: str | None = None

    def accuracy(self, domain: str) -> float:
        return self.domains[domain].accuracy

    def to_json(self, with_predictions: bool = True) -> str:
        payload = {"pair": self.pair_name, "split": self.split,
                   "domains": {name: rep.to_json_dict(self.seed, self.config_hash,
                                                      with_predictions)
                               for name, rep in sorted(self.domains.items())}}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------ rank scoring

def class_scores(state: ModelState, texts: list[str], template: PromptTemplate,
                 label_space: LabelSpace) -> np.ndarray:
    """Length-normalized log-probability of each class string -> [n, K]."""
    n, k = len(texts), label_space.num_classes
    scores = np.zeros((n, k))
    with ag.no_grad():
        for c in range(k):
            for start in range(0, n, _EVAL_BATCH):
                chunk = texts[start: start + _EVAL_BATCH]
                pairs = [encode_pair(cls_template(x, c, template), state.vocab,
                                     state.config.max_seq_len, append_eos=False)
                         for x in chunk]
                batch = make_batch(pairs, state.config)
                out = forward(state.params, state.config, batch)
                per_pair = nll_loss(out.logits, batch.target_ids,
                                    batch.target_pad, reduce="none")
                scores[start: start + len(chunk), c] = -per_pair.data
    return scores


def rank_classify(state: ModelState, x: str, template: PromptTemplate,
                  label_space: LabelSpace) -> int:
    """Highest-scoring class; ties resolve to the lowest class index."""
    return int(np.argmax(class_scores(state, [x], template, label_space)[0]))


def _predict_all(state, texts, template, label_space) -> list[int]:
    scores = class_scores(state, texts, template, label_space)
    return [int(np.argmax(row)) for row in scores]


def _default_template(state: ModelState, pair: DomainPair,
                      template: PromptTemplate | None) -> PromptTemplate:
    if template is not None:
        return template
    return PromptTemplate.for_label_space(pair.label_space, kind="cls")


def evaluate(state: ModelState, pair: DomainPair, split: str = "test",
             template: PromptTemplate | None = None, seed: int | None = None,
             config_hash: str | None = None,
             perturb=None) -> EvalReport:
    """Rank-classify every example of both domains on the given split."""
    template = _default_template(state, pair, template)
    domains = {}
    for name, corpora in (("source", pair.source), ("target", pair.target)):
        corpus = corpora.split(split)
        texts = [perturb(t) if perturb else t for t in corpus.texts]
        preds = _predict_all(state, texts, template, pair.label_space)
        labels = evaluation_labels(corpus)
        correct = sum(p == y for p, y in zip(preds, labels))
        domains[name] = DomainReport(name, split, correct / len(corpus),
                                     len(corpus), tuple(preds))
    return EvalReport(pair.name, split, domains, seed, config_hash)


def masked_inference_eval(state: ModelState, pair: DomainPair,
                          word_sets: WordSets, mode: str, split: str = "test",
                          template: PromptTemplate | None = None,
                          seed: int | None = None,
                          config_hash: str | None = None) -> EvalReport:
    """Evaluate with set-member words blanked out of each input."""

    def perturb(text: str) -> str:
        return " ".join(mask_at_inference(text.split(), word_sets, mode))

    return evaluate(state, pair, split, template, seed, config_hash, perturb)


# --------------------------------------------------------- embedding export

def export_embeddings(state: ModelState, pair: DomainPair, split: str,
                      path, template: PromptTemplate | None = None) -> None:
    """CSV of final-layer pooled embeddings: d_model floats, domain, label."""
    from .model import embed
    from .tokenizer import encode

    template = _default_template(state, pair, template)
    d = state.config.d_model
    lines = [",".join([f"e{i}" for i in range(d)] + ["domain", "label"])]
    for name, corpora in (("source", pair.source), ("target", pair.target)):
        corpus = corpora.split(split)
        labels = evaluation_labels(corpus)
        with ag.no_grad():
            for start in range(0, len(corpus), _EVAL_BATCH):
                chunk = corpus.texts[start: start + _EVAL_BATCH]
                inputs = [encode(cls_template(t, 0, template).input_text,
                                 state.vocab, state.config.max_seq_len,
                                 keep_specials=True) for t in chunk]
                width = max(len(s) for s in inputs)
                ids = np.zeros((len(inputs), width), dtype=np.intp)
                for i, s in enumerate(inputs):
                    ids[i, : len(s)] = s
                pooled = embed(state.params, state.config, ids, ids != 0)[-1].data
                for row, y in zip(pooled, labels[start: start + len(chunk)]):
                    lines.append(",".join([repr(v) for v in row] + [name, str(y)]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --------------------------------------------------------- statistical tests

@dataclass(frozen=True)
class MwuResult:
    statistic: float        # U of the first sample
    pvalue: float
    method: str             # exact | asymptotic


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    pvalue: float
    df: float
    degenerate: bool = False


def _midranks(values: list[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mid = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mid
        i = j + 1
    return ranks


def _u_statistic(pooled_ranks, positions, n) -> float:
    rank_sum = sum(pooled_ranks[p] for p in positions)
    return rank_sum - n * (n + 1) / 2.0


def mann_whitney_u(sample_a, sample_b) -> MwuResult:
    """Two-sided Mann-Whitney U with midrank ties.

    Exact enumeration of all C(n+m, n) assignments when both samples have
    at most 8 values; tie-corrected normal approximation otherwise.
    """
    a, b = [float(v) for v in sample_a], [float(v) for v in sample_b]
    n, m = len(a), len(b)
    if n < 2 or m < 2:
        raise ValueError("both samples need at least 2 values")
    pooled = a + b
    ranks = _midranks(pooled)
    u_obs = _u_statistic(ranks, range(n), n)
    if n <= 8 and m <= 8:
        center = n * m / 2.0
        obs_dev = abs(u_obs - center)
        total = hits = 0
        for combo in itertools.combinations(range(n + m), n):
            total += 1
            if abs(_u_statistic(ranks, combo, n) - center) >= obs_dev - 1e-12:
                hits += 1
        return MwuResult(u_obs, hits / total, "exact")
    big_n = n + m
    tie_term = 0.0
    for _, group in itertools.groupby(sorted(pooled)):
        t = len(list(group))
        tie_term += t ** 3 - t
    sigma2 = n * m / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if sigma2 <= 0:
        return MwuResult(u_obs, 1.0, "asymptotic")
    z = (abs(u_obs - n * m / 2.0) - 0.5) / math.sqrt(sigma2)
    z = max(z, 0.0)
    pvalue = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return MwuResult(u_obs, pvalue, "asymptotic")


def students_t(sample_a, sample_b) -> TTestResult:
    """Welch's two-sided t-test."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("both samples need at least 2 values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va + vb == 0.0:
        equal = bool(a.mean() == b.mean())
        return TTestResult(0.0 if equal else math.inf,
                           1.0 if equal else 0.0, float(a.size + b.size - 2),
                           degenerate=True)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    pvalue = 2.0 * float(stdtr(df, -abs(t)))
    return TTestResult(float(t), pvalue, float(df))
