"""Training schedules over Adam with deterministic batching.

Eight schedules share one step loop: two-phase continued pre-training,
ramped and vanilla single-phase variants, three invariance baselines that
minimize embedding divergence, and the supervised source-only /
source-plus-target references.  Every random draw comes from a labeled
stream of the config seed, so reruns are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .corpus import Corpus, DomainPair, kshot_subsample, labeled_view_for_evaluation
from .divergence import (KernelBank, LambdaSchedule, coral, lambda_at,
                         mkmmd_layerwise, mmd_over_logits)
from .kvconfig import (ConfigError, get_choice, get_float, get_int, get_str,
                       config_hash)
from .masking import MaskStrategy, compute_pmi, plan_masks, select_word_sets
from .model import (Batch, ModelConfig, ModelState, Parameters, PeftConfig,
                    embed, first_token_logits, forward, init_parameters,
                    make_batch, nll_loss)
from .seeding import stream_rng
from .templating import (PromptTemplate, TemplatePair, clm_template,
                         cls_template, mlm_template)
from .tokenizer import EOS_ID, Vocab, build_vocab, encode

SCHEDULES = ("two_phase_cpt", "single_phase_cpt", "single_phase_vanilla",
             "udapter_joint", "udapter_fixed_weight", "udapter_two_phase",
             "src_only", "src_plus_tgt")

_SUPERVISED_ONLY = ("src_only", "src_plus_tgt")
_DIVERGENCE_SCHEDULES = ("udapter_joint", "udapter_fixed_weight", "udapter_two_phase")


@dataclass(frozen=True)
class TrainConfig:
    """A fully deterministic experiment description."""

    schedule: str = "two_phase_cpt"
    phase1_steps: int = 2000
    phase2_steps: int = 2000
    batch_size: int = 8
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_strategy: str = "random"      # random | informative | uninformative
    mask_rate: float = 0.15
    pmi_k_percent: float = 15.0
    pmi_min_freq: int = 10
    phase1_data: str = "source_and_target"
    lambda_kind: str = "linear"        # linear | sigmoid | fixed
    lambda_value: float = 0.5
    divergence_kind: str = "mkmmd"     # mkmmd | mmd_logits | coral
    mmd_weight: float = 3.0
    kshot: int = 0                     # 0 = full labeled data in phase 2
    cpt_kind: str = "auto"             # auto | mlm | clm
    seed: int = 0
    arch: str = "encoder_decoder"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 64
    peft: str = "none"
    adapter_r: int = 16
    max_vocab: int = 4096
    min_count: int = 1
    instruction: str = "Fill in the blanks:"
    cls_pattern: str = "{x} Is this sentence positive or negative?"
    data_dir: str = ""

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.phase1_steps < 1 or self.phase2_steps < 1:
            raise ConfigError("phase step counts must be >= 1")
        if self.schedule in _DIVERGENCE_SCHEDULES and self.batch_size < 2:
            raise ConfigError("divergence schedules need batch_size >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.phase1_data not in ("source_only", "target_only", "source_and_target"):
            raise ConfigError(f"unknown phase1 data selection {self.phase1_data!r}")

    @property
    def total_steps(self) -> int:
        """Steps the schedule actually runs.

        Two-phase schedules run both phases; single-phase joint schedules
        run the combined budget for comparability; the supervised baselines
        run the supervised phase budget only.
        """
        if self.schedule in ("two_phase_cpt", "udapter_two_phase"):
            return self.phase1_steps + self.phase2_steps
        if self.schedule in _SUPERVISED_ONLY:
            return self.phase2_steps
        return self.phase1_steps + self.phase2_steps

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(arch=self.arch, d_model=self.d_model,
                           n_heads=self.n_heads, n_layers=self.n_layers,
                           d_ff=self.d_ff, vocab_size=vocab_size,
                           max_seq_len=self.max_seq_len,
                           peft=PeftConfig(self.peft, self.adapter_r))

    def resolved_cpt_kind(self) -> str:
        if self.cpt_kind != "auto":
            return self.cpt_kind
        return "mlm" if self.arch == "encoder_decoder" else "clm"

    def lambda_schedule(self) -> LambdaSchedule:
        if self.schedule == "single_phase_vanilla":
            return LambdaSchedule("fixed", self.total_steps, value=0.5)
        return LambdaSchedule(self.lambda_kind, self.total_steps,
                              value=self.lambda_value)

    # ------------------------------------------------------------ kv I/O
    _KV_KEYS = {
        "schedule": ("schedule", str), "phase1.steps": ("phase1_steps", int),
        "phase2.steps": ("phase2_steps", int), "batch_size": ("batch_size", int),
        "lr": ("lr", float), "adam.beta1": ("adam_beta1", float),
        "adam.beta2": ("adam_beta2", float), "adam.eps": ("adam_eps", float),
        "mask.strategy": ("mask_strategy", str), "mask.rate": ("mask_rate", float),
        "pmi.k_percent": ("pmi_k_percent", float), "pmi.min_freq": ("pmi_min_freq", int),
        "phase1.data": ("phase1_data", str), "lambda.kind": ("lambda_kind", str),
        "lambda.value": ("lambda_value", float),
        "divergence.kind": ("divergence_kind", str), "mmd.weight": ("mmd_weight", float),
        "kshot": ("kshot", int), "cpt.kind": ("cpt_kind", str), "seed": ("seed", int),
        "model.arch": ("arch", str), "model.d_model": ("d_model", int),
        "model.n_heads": ("n_heads", int), "model.n_layers": ("n_layers", int),
        "model.d_ff": ("d_ff", int), "model.max_seq_len": ("max_seq_len", int),
        "model.peft": ("peft", str), "model.adapter_r": ("adapter_r", int),
        "vocab.max": ("max_vocab", int), "vocab.min_count": ("min_count", int),
        "template.instruction": ("instruction", str),
        "template.cls_pattern": ("cls_pattern", str), "data.dir": ("data_dir", str),
    }

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "TrainConfig":
        for key in items:
            if key not in cls._KV_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
        kwargs = {}
        for key, (attr, typ) in cls._KV_KEYS.items():
            if key not in items:
                continue
            if typ is int:
                kwargs[attr] = get_int(items, key)
            elif typ is float:
                kwargs[attr] = get_float(items, key)
            else:
                kwargs[attr] = get_str(items, key)
        return cls(**kwargs)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for key, (attr, typ) in self._KV_KEYS.items():
            value = getattr(self, attr)
            out[key] = repr(value) if typ is float else str(value)
        return out

    def hash(self) -> str:
        return config_hash(self.to_kv())


# ----------------------------------------------------------------- encoding

def encode_pair(pair: TemplatePair, vocab: Vocab, max_seq_len: int,
                append_eos: bool = True) -> tuple[list[int], list[int]]:
    """Tokenize a template pair; targets end in EOS unless told otherwise."""
    inp = encode(pair.input_text, vocab, max_seq_len, keep_specials=True)
    cap = max_seq_len - 1 if append_eos else max_seq_len
    tgt = encode(pair.output_text, vocab, cap, keep_specials=True)
    if append_eos and (not tgt or tgt[-1] != EOS_ID):
        tgt = tgt + [EOS_ID]
    return inp, tgt


def build_run_vocab(pair: DomainPair, template: PromptTemplate,
                    config: TrainConfig) -> Vocab:
    """Vocabulary over both domains' training text plus all template text."""
    template_bits = [template.instruction,
                     template.cls_pattern.replace("{x}", " "),
                     *template.verbalizer]
    return build_vocab([pair.source.train.texts, pair.target.train.texts,
                        template_bits],
                       max_vocab=config.max_vocab, min_count=config.min_count)


def cpt_texts(pair: DomainPair, selection: str) -> tuple[str, ...]:
    """The unlabeled pool for the pre-training objective."""
    if selection == "source_only":
        return pair.source.train.texts
    if selection == "target_only":
        return pair.target.train.texts
    return pair.source.train.texts + pair.target.train.texts


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    """First/second moments per trainable tensor plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: Parameters, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    names = params.trainable_names()
    return AdamState(m={n: np.zeros_like(params[n].data) for n in names},
                     v={n: np.zeros_like(params[n].data) for n in names},
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: Parameters,
              grads: dict[str, np.ndarray], lr: float) -> None:
    """Standard bias-corrected Adam update; frozen tensors untouched."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    scale = lr / bc1
    for name in params.trainable_names():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        np.multiply(m, state.beta1, out=m)
        m += (1.0 - state.beta1) * g
        np.multiply(v, state.beta2, out=v)
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        params[name].data -= scale * m / denom


# ----------------------------------------------------------------- sampling

class _Sampler:
    """Epoch-shuffled index batches; permutation derived per epoch."""

    def __init__(self, n: int, batch_size: int, seed: int, name: str):
        if n < batch_size:
            raise ConfigError(f"{name}: corpus of {n} examples cannot fill "
                              f"batches of {batch_size}")
        self.n, self.batch_size, self.seed, self.name = n, batch_size, seed, name
        self.epoch = -1
        self.cursor = 0
        self.order = np.empty(0, dtype=np.intp)

    def next(self) -> tuple[int, list[int]]:
        if self.cursor + self.batch_size > len(self.order):
            self.epoch += 1
            self.order = stream_rng(self.seed, "batch", self.name,
                                    self.epoch).permutation(self.n)
            self.cursor = 0
        idx = self.order[self.cursor: self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return self.epoch, [int(i) for i in idx]


# ---------------------------------------------------------------- loss log

@dataclass(frozen=True)
class LogRow:
    step: int
    lam: float | None
    loss: float
    loss_cls: float | None = None
    loss_cpt: float | None = None
    loss_div: float | None = None


LOG_HEADER = "step,lambda,loss,loss_cls,loss_cpt,loss_div"


def log_to_csv(rows: list[LogRow]) -> str:
    def cell(v):
        return "" if v is None else repr(v)

    lines = [LOG_HEADER]
    for r in rows:
        lines.append(",".join([str(r.step), cell(r.lam), cell(r.loss),
                               cell(r.loss_cls), cell(r.loss_cpt), cell(r.loss_div)]))
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    state: ModelState
    log: list[LogRow]
    config: TrainConfig


# --------------------------------------------------------------- the runner

class _Runner:
    """Shared machinery for one training run."""

    def __init__(self, config: TrainConfig, pair: DomainPair):
        self.config = config
        self.pair = pair
        self.template = PromptTemplate.for_label_space(
            pair.label_space, kind="cls", instruction=config.instruction,
            cls_pattern=config.cls_pattern)
        self.vocab = build_run_vocab(pair, self.template, config)
        self.model_config = config.model_config(len(self.vocab))
        self.params = init_parameters(self.model_config, config.seed)
        self.adam = init_adam(self.params, config.adam_beta1, config.adam_beta2,
                              config.adam_eps)
        self.cpt_kind = config.resolved_cpt_kind()
        self.strategy = self._mask_strategy()
        self.bank = KernelBank()

        self.cpt_pool = cpt_texts(pair, config.phase1_data)
        cls_corpus = pair.source.train
        if config.schedule == "src_plus_tgt":
            tgt_labeled = labeled_view_for_evaluation(pair.target.train)
            cls_corpus = Corpus(tuple(cls_corpus) + tuple(tgt_labeled),
                                pair.label_space)
        if config.kshot:
            cls_corpus = kshot_subsample(cls_corpus, config.kshot, config.seed)
        self.cls_corpus = cls_corpus

        bs, seed = config.batch_size, config.seed
        self.cpt_sampler = _Sampler(len(self.cpt_pool), bs, seed, "cpt")
        self.cls_sampler = _Sampler(len(self.cls_corpus), bs, seed, "cls")
        self.div_src_sampler = _Sampler(len(pair.source.train), bs, seed, "div_src")
        self.div_tgt_sampler = _Sampler(len(pair.target.train), bs, seed, "div_tgt")

    def _mask_strategy(self) -> MaskStrategy:
        cfg = self.config
        if cfg.mask_strategy == "random":
            return MaskStrategy("random", rate=cfg.mask_rate)
        table = compute_pmi(self.pair.source.train)
        sets = select_word_sets(table, cfg.pmi_k_percent, cfg.pmi_min_freq)
        return MaskStrategy(cfg.mask_strategy, rate=cfg.mask_rate, word_sets=sets)

    # ------------------------------------------------------------- losses
    def cls_loss(self):
        epoch, idx = self.cls_sampler.next()
        pairs = []
        for i in idx:
            ex = self.cls_corpus[i]
            tp = cls_template(ex.text, ex.label, self.template)
            pairs.append(encode_pair(tp, self.vocab, self.config.max_seq_len))
        batch = make_batch(pairs, self.model_config)
        out = forward(self.params, self.model_config, batch)
        return nll_loss(out.logits, batch.target_ids, batch.target_pad)

    def cpt_loss(self):
        epoch, idx = self.cpt_sampler.next()
        pairs = []
        for i in idx:
            text = self.cpt_pool[i]
            if self.cpt_kind == "clm":
                tp = clm_template(text)
            else:
                words = text.split()
                rng = stream_rng(self.config.seed, "mask", epoch, i)
                plan = plan_masks(words, self.strategy, rng)
                tp = mlm_template(words, plan, replace(self.template, kind="mlm"))
            pairs.append(encode_pair(tp, self.vocab, self.config.max_seq_len,
                                     append_eos=(self.cpt_kind != "clm")))
        align = "shifted" if (self.cpt_kind == "clm"
                              and self.model_config.arch == "decoder_only") else "suffix"
        batch = make_batch(pairs, self.model_config, align=align)
        out = forward(self.params, self.model_config, batch)
        return nll_loss(out.logits, batch.target_ids, batch.target_pad)

    def div_loss(self):
        _, src_idx = self.div_src_sampler.next()
        _, tgt_idx = self.div_tgt_sampler.next()
        src_inputs = self._cls_inputs(self.pair.source.train, src_idx)
        tgt_inputs = self._cls_inputs(self.pair.target.train, tgt_idx)
        kind = self.config.divergence_kind
        if kind == "mmd_logits":
            src = first_token_logits(self.params, self.model_config, src_inputs)
            tgt = first_token_logits(self.params, self.model_config, tgt_inputs)
            return mmd_over_logits(src, tgt, self.bank)
        src_layers = self._embed(src_inputs)
        tgt_layers = self._embed(tgt_inputs)
        if kind == "coral":
            return coral(src_layers[-1], tgt_layers[-1])
        if kind == "mkmmd":
            return mkmmd_layerwise(src_layers, tgt_layers, self.bank)
        raise ConfigError(f"unknown divergence kind {kind!r}")

    def _cls_inputs(self, corpus: Corpus, idx) -> list[list[int]]:
        inputs = []
        for i in idx:
            tp = cls_template(corpus[i].text, 0, self.template)
            inputs.append(encode(tp.input_text, self.vocab,
                                 self.config.max_seq_len, keep_specials=True))
        return inputs

    def _embed(self, inputs: list[list[int]]):
        width = max(len(s) for s in inputs)
        ids = np.zeros((len(inputs), width), dtype=np.intp)
        for i, s in enumerate(inputs):
            ids[i, : len(s)] = s
        return embed(self.params, self.model_config, ids, ids != 0)

    # --------------------------------------------------------------- steps
    def optimize(self, loss) -> None:
        self.params.zero_grads()
        ag.backward(loss)
        grads = {n: self.params[n].grad for n in self.params.trainable_names()
                 if self.params[n].grad is not None}
        adam_step(self.adam, self.params, grads, self.config.lr)


def run(config: TrainConfig, pair: DomainPair,
        progress=None) -> TrainResult:
    """Train per the configured schedule; returns the model and loss log."""
    runner = _Runner(config, pair)
    schedule = config.schedule
    lam_schedule = config.lambda_schedule()
    rows: list[LogRow] = []
    for step in range(config.total_steps):
        if schedule in ("two_phase_cpt", "udapter_two_phase") \
                and step == config.phase1_steps:
            # phase 2 is its own training stage: fresh optimizer moments
            runner.adam = init_adam(runner.params, config.adam_beta1,
                                    config.adam_beta2, config.adam_eps)
        if schedule == "two_phase_cpt":
            if step < config.phase1_steps:
                loss = runner.cpt_loss()
                row = LogRow(step, None, loss.item(), loss_cpt=loss.item())
            else:
                loss = runner.cls_loss()
                row = LogRow(step, None, loss.item(), loss_cls=loss.item())
        elif schedule == "udapter_two_phase":
            if step < config.phase1_steps:
                loss = runner.div_loss()
                row = LogRow(step, None, loss.item(), loss_div=loss.item())
            else:
                loss = runner.cls_loss()
                row = LogRow(step, None, loss.item(), loss_cls=loss.item())
        elif schedule in ("single_phase_cpt", "single_phase_vanilla"):
            lam = lambda_at(lam_schedule, step)
            cls = runner.cls_loss()
            cpt = runner.cpt_loss()
            loss = cls * lam + cpt * (1.0 - lam)
            row = LogRow(step, lam, loss.item(), loss_cls=cls.item(),
                         loss_cpt=cpt.item())
        elif schedule == "udapter_joint":
            lam = lambda_at(lam_schedule, step)
            cls = runner.cls_loss()
            div = runner.div_loss()
            loss = cls * lam + div * (1.0 - lam)
            row = LogRow(step, lam, loss.item(), loss_cls=cls.item(),
                         loss_div=div.item())
        elif schedule == "udapter_fixed_weight":
            cls = runner.cls_loss()
            div = runner.div_loss()
            loss = cls + div * config.mmd_weight
            row = LogRow(step, None, loss.item(), loss_cls=cls.item(),
                         loss_div=div.item())
        else:   # src_only, src_plus_tgt
            loss = runner.cls_loss()
            row = LogRow(step, None, loss.item(), loss_cls=loss.item())
        runner.optimize(loss)
        rows.append(row)
        if progress is not None:
            progress(step, config.total_steps, row)
    state = ModelState(runner.model_config, runner.params, runner.vocab)
    return TrainResult(state, rows, config)
