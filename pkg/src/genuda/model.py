"""Tiny autoregressive transformer, built on the autograd tape.

Two architectures share one parameter/naming scheme: an encoder-decoder
(cross-attending decoder) and a decoder-only stack that consumes the input
and target as one causal sequence.  Pre-LN blocks, learned absolute
positions, no biases outside the layer norms, float64 throughout.

PEFT variants: IA3 rescaling vectors on keys/values/feed-forward
activations, or bottleneck adapters added at each layer output.  Enabling
either freezes every base tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .seeding import stream_rng
from .tokenizer import EOS_ID, PAD_ID, Vocab

NEG_INF = -1e30


class ShapeError(ValueError):
    """Inconsistent tensor dimensions."""


@dataclass(frozen=True)
class PeftConfig:
    kind: str = "none"          # none | ia3 | adapter
    adapter_r: int = 16

    def __post_init__(self):
        if self.kind not in ("none", "ia3", "adapter"):
            raise ShapeError(f"unknown peft kind {self.kind!r}")
        if self.kind == "adapter" and self.adapter_r < 1:
            raise ShapeError("adapter bottleneck must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "encoder_decoder"   # encoder_decoder | decoder_only
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2               # per stack
    d_ff: int = 128
    vocab_size: int = 0
    max_seq_len: int = 64
    peft: PeftConfig = field(default_factory=PeftConfig)

    def __post_init__(self):
        if self.arch not in ("encoder_decoder", "decoder_only"):
            raise ShapeError(f"unknown arch {self.arch!r}")
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_heads, self.n_layers, self.d_ff) < 1:
            raise ShapeError("model dimensions must be >= 1")


class Parameters:
    """Named tensors plus the frozen mask implied by the PEFT setting."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self.tensors[n].requires_grad]

    def count(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return sum(self.tensors[n].data.size for n in names)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def gradients(self) -> dict[str, np.ndarray]:
        """Per-tensor gradients; frozen tensors report exact zeros."""
        out = {}
        for name in self.names():
            t = self.tensors[name]
            if t.requires_grad and t.grad is not None:
                out[name] = t.grad
            else:
                out[name] = np.zeros_like(t.data)
        return out


def _is_peft_tensor(name: str) -> bool:
    return ".ia3_" in name or ".adapter." in name


def init_parameters(config: ModelConfig, seed: int) -> Parameters:
    """Gaussian(0, 0.02) weights; identity-start PEFT tensors.

    Each tensor draws from its own named stream, so the base weights are
    identical across PEFT settings for the same seed.
    """
    if config.vocab_size < 6:
        raise ShapeError("vocab_size must cover the special tokens")
    d, f, v, r = config.d_model, config.d_ff, config.vocab_size, config.peft.adapter_r
    shapes: dict[str, tuple] = {"emb.tok": (v, d), "head.w": (d, v),
                                "final.ln.g": (d,), "final.ln.b": (d,)}
    if config.arch == "encoder_decoder":
        shapes["emb.pos_enc"] = (config.max_seq_len, d)
        shapes["emb.pos_dec"] = (config.max_seq_len, d)
        stacks = [("enc", ("self", "ff")), ("dec", ("self", "cross", "ff"))]
    else:
        shapes["emb.pos"] = (config.max_seq_len, d)
        stacks = [("dec", ("self", "ff"))]
    for stack, blocks in stacks:
        for i in range(config.n_layers):
            prefix = f"{stack}.{i}"
            ln = 1
            for block in blocks:
                shapes[f"{prefix}.ln{ln}.g"] = (d,)
                shapes[f"{prefix}.ln{ln}.b"] = (d,)
                ln += 1
                if block in ("self", "cross"):
                    for w in ("wq", "wk", "wv", "wo"):
                        shapes[f"{prefix}.{block}.{w}"] = (d, d)
                    if config.peft.kind == "ia3":
                        shapes[f"{prefix}.{block}.ia3_k"] = (d,)
                        shapes[f"{prefix}.{block}.ia3_v"] = (d,)
                else:
                    shapes[f"{prefix}.ff.w1"] = (d, f)
                    shapes[f"{prefix}.ff.w2"] = (f, d)
                    if config.peft.kind == "ia3":
                        shapes[f"{prefix}.ff.ia3_ff"] = (f,)
            if config.peft.kind == "adapter":
                shapes[f"{prefix}.adapter.down"] = (d, r)
                shapes[f"{prefix}.adapter.up"] = (r, d)
    tensors = {}
    for name, shape in shapes.items():
        rng = stream_rng(seed, "init", name)
        if ".ln" in name:
            data = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        elif ".ia3_" in name:
            data = np.ones(shape)
        elif name.endswith(".adapter.up"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    if config.peft.kind != "none":
        for name, t in tensors.items():
            t.requires_grad = _is_peft_tensor(name)
    return Parameters(tensors)


@dataclass(frozen=True)
class ModelState:
    """Everything needed to run the model: config, parameters, vocabulary."""

    config: ModelConfig
    params: Parameters
    vocab: Vocab


@dataclass
class Batch:
    """Padded id arrays prepared for one forward pass.

    encoder-decoder: ``enc_ids``/``enc_pad`` feed the encoder, ``dec_ids``
    the decoder (shifted right, EOS start token).  decoder-only: ``enc_ids``
    holds input+target tokens as one sequence and ``positions[b, t]`` is the
    index whose logits predict ``target_ids[b, t]``.  ``pool_pad`` marks the
    input (x-tilde) positions used for layer-embedding pooling.
    """

    enc_ids: np.ndarray
    enc_pad: np.ndarray
    target_ids: np.ndarray
    target_pad: np.ndarray
    dec_ids: np.ndarray | None = None
    positions: np.ndarray | None = None
    pool_pad: np.ndarray | None = None


def make_batch(pairs: list[tuple[list[int], list[int]]], config: ModelConfig,
               align: str = "suffix") -> Batch:
    """Pad a list of (input_ids, target_ids) into one Batch.

    Targets are expected to already carry their trailing EOS.  ``align``
    matters only for the decoder-only model: "suffix" appends the target
    after the input (templated pairs), "shifted" is the CLM case where
    position t of the input itself predicts target t.
    """
    if not pairs:
        raise ShapeError("empty batch")
    for inp, tgt in pairs:
        if not inp or not tgt:
            raise ShapeError("empty input or target sequence in batch")
    if config.arch == "encoder_decoder":
        enc_ids = _pad([inp for inp, _ in pairs])
        tgt_ids = _pad([tgt for _, tgt in pairs])
        dec_ids = _pad([[EOS_ID] + tgt[:-1] for _, tgt in pairs])
        return Batch(enc_ids, (enc_ids != PAD_ID), tgt_ids, (tgt_ids != PAD_ID),
                     dec_ids=dec_ids, pool_pad=(enc_ids != PAD_ID))
    tokens, positions, pool = [], [], []
    for inp, tgt in pairs:
        if align == "shifted":
            if len(tgt) != len(inp):
                raise ShapeError("shifted alignment needs len(target) == len(input)")
            tokens.append(inp)
            positions.append(list(range(len(inp))))
            pool.append([1] * len(inp))
        else:
            tokens.append(inp + tgt[:-1])
            positions.append(list(range(len(inp) - 1, len(inp) - 1 + len(tgt))))
            pool.append([1] * len(inp) + [0] * (len(tgt) - 1))
    ids = _pad(tokens)
    tgt_ids = _pad([tgt for _, tgt in pairs])
    return Batch(ids, (ids != PAD_ID), tgt_ids, (tgt_ids != PAD_ID),
                 positions=_pad(positions), pool_pad=_pad(pool).astype(bool))


def _pad(seqs: list[list[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.intp)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class ForwardOutput:
    """Pre-softmax target logits plus pooled per-layer hidden states."""

    logits: Tensor                  # [batch, target_len, vocab]
    layer_embeddings: list[Tensor]  # n_layers tensors of [batch, d_model]


# ----------------------------------------------------------------- blocks

def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ag.layer_norm(x, g, b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape((b, t, n_heads, d // n_heads)).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape((b, t, h * dh))


def _attention(params: Parameters, prefix: str, x_q: Tensor, x_kv: Tensor,
               bias: np.ndarray, n_heads: int, use_ia3: bool) -> Tensor:
    q = x_q @ params[f"{prefix}.wq"]
    k = x_kv @ params[f"{prefix}.wk"]
    v = x_kv @ params[f"{prefix}.wv"]
    if use_ia3:
        k = k * params[f"{prefix}.ia3_k"]
        v = v * params[f"{prefix}.ia3_v"]
    dh = q.shape[-1] // n_heads
    q, k, v = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = ag.softmax(scores + bias, axis=-1)
    return _merge_heads(attn @ v) @ params[f"{prefix}.wo"]


def _feed_forward(params: Parameters, prefix: str, x: Tensor, use_ia3: bool) -> Tensor:
    h = ag.relu(x @ params[f"{prefix}.w1"])
    if use_ia3:
        h = h * params[f"{prefix}.ia3_ff"]
    return h @ params[f"{prefix}.w2"]


def _adapter(params: Parameters, prefix: str, x: Tensor) -> Tensor:
    return x + ag.relu(x @ params[f"{prefix}.down"]) @ params[f"{prefix}.up"]


def _pad_bias(pad: np.ndarray) -> np.ndarray:
    """[B, Tk] key-padding mask -> additive [B, 1, 1, Tk] bias."""
    return np.where(pad, 0.0, NEG_INF)[:, None, None, :]


def _causal_bias(t: int) -> np.ndarray:
    return np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, NEG_INF)[None, None]


def _embed_tokens(params: Parameters, ids: np.ndarray, pos_name: str) -> Tensor:
    tok = ag.embedding(params["emb.tok"], ids)
    pos = ag.embedding(params[pos_name], np.arange(ids.shape[1]))
    return tok + pos


def _pool(x: Tensor, pad: np.ndarray) -> Tensor:
    """Mean over non-PAD positions -> [B, d_model]."""
    weights = pad.astype(np.float64)
    weights /= weights.sum(axis=1, keepdims=True)
    return (x * weights[:, :, None]).sum(axis=1)


def _run_stack(params: Parameters, config: ModelConfig, stack: str, x: Tensor,
               self_bias: np.ndarray, pool_pad: np.ndarray,
               memory: Tensor | None = None,
               memory_bias: np.ndarray | None = None) -> tuple[Tensor, list[Tensor]]:
    peft = config.peft.kind
    pooled = []
    for i in range(config.n_layers):
        prefix = f"{stack}.{i}"
        ln = 1
        normed = _layer_norm(x, params[f"{prefix}.ln{ln}.g"],
                             params[f"{prefix}.ln{ln}.b"])
        x = x + _attention(params, f"{prefix}.self", normed, normed,
                           bias=self_bias, n_heads=config.n_heads,
                           use_ia3=(peft == "ia3"))
        ln += 1
        if memory is not None:
            x = x + _cross(params, f"{prefix}.cross",
                           _layer_norm(x, params[f"{prefix}.ln{ln}.g"],
                                       params[f"{prefix}.ln{ln}.b"]),
                           memory, memory_bias, config.n_heads, peft == "ia3")
            ln += 1
        x = x + _feed_forward(params, f"{prefix}.ff",
                              _layer_norm(x, params[f"{prefix}.ln{ln}.g"],
                                          params[f"{prefix}.ln{ln}.b"]),
                              use_ia3=(peft == "ia3"))
        if peft == "adapter":
            x = _adapter(params, f"{prefix}.adapter", x)
        pooled.append(_pool(x, pool_pad))
    return x, pooled


def _cross(params, prefix, x_q, memory, memory_bias, n_heads, use_ia3):
    return _attention(params, prefix, x_q, memory, memory_bias, n_heads, use_ia3)


def forward(params: Parameters, config: ModelConfig, batch: Batch) -> ForwardOutput:
    """Logits over target positions plus pooled per-layer embeddings.

    Pooling covers the input (x-tilde) positions only: encoder positions
    for the encoder-decoder, the causal prefix for the decoder-only model.
    """
    if batch.enc_ids.shape[1] > config.max_seq_len or \
            batch.target_ids.shape[1] > config.max_seq_len:
        raise ShapeError("sequence exceeds max_seq_len")
    if config.arch == "encoder_decoder":
        enc_x = _embed_tokens(params, batch.enc_ids, "emb.pos_enc")
        enc_out, pooled = _run_stack(params, config, "enc", enc_x,
                                     _pad_bias(batch.enc_pad), batch.pool_pad)
        dec_x = _embed_tokens(params, batch.dec_ids, "emb.pos_dec")
        dec_out, _ = _run_stack(params, config, "dec", dec_x,
                                _causal_bias(batch.dec_ids.shape[1]),
                                batch.target_pad, memory=enc_out,
                                memory_bias=_pad_bias(batch.enc_pad))
        final = _layer_norm(dec_out, params["final.ln.g"], params["final.ln.b"])
        logits = final @ params["head.w"]
        return ForwardOutput(logits, pooled)
    x = _embed_tokens(params, batch.enc_ids, "emb.pos")
    out, pooled = _run_stack(params, config, "dec", x,
                             _causal_bias(batch.enc_ids.shape[1]), batch.pool_pad)
    picked = ag.take_timesteps(out, batch.positions)
    final = _layer_norm(picked, params["final.ln.g"], params["final.ln.b"])
    logits = final @ params["head.w"]
    return ForwardOutput(logits, pooled)


def embed(params: Parameters, config: ModelConfig, ids: np.ndarray,
          pad: np.ndarray) -> list[Tensor]:
    """Pooled per-layer embeddings of bare input sequences.

    Because attention over the input is causal (decoder-only) or
    input-restricted (encoder), these equal the pooled embeddings a full
    forward would produce for the same inputs.
    """
    if config.arch == "encoder_decoder":
        x = _embed_tokens(params, ids, "emb.pos_enc")
        _, pooled = _run_stack(params, config, "enc", x, _pad_bias(pad), pad)
    else:
        x = _embed_tokens(params, ids, "emb.pos")
        _, pooled = _run_stack(params, config, "dec", x,
                               _causal_bias(ids.shape[1]), pad)
    return pooled


def first_token_logits(params: Parameters, config: ModelConfig,
                       inputs: list[list[int]]) -> Tensor:
    """Logits of the first target token for each input -> [B, vocab]."""
    batch = make_batch([(inp, [EOS_ID]) for inp in inputs], config)
    out = forward(params, config, batch)
    return out.logits.reshape((len(inputs), config.vocab_size))


# ------------------------------------------------------------------- loss

def nll_loss(logits: Tensor, target_ids: np.ndarray, target_pad: np.ndarray,
             reduce: str = "mean") -> Tensor:
    """Per-pair NLL averaged over output words; batch mean by default."""
    counts = target_pad.sum(axis=1).astype(np.float64)
    if (counts == 0).any():
        raise ShapeError("a pair in the batch has an empty (PAD-only) target")
    logp = ag.log_softmax(logits, axis=-1)
    picked = ag.gather_last(logp, target_ids)
    per_pair = (picked * target_pad).sum(axis=1) * (-1.0 / counts)
    if reduce == "none":
        return per_pair
    return per_pair.mean()


def backward(loss: Tensor) -> None:
    """Reverse-mode gradients for every trainable tensor feeding the loss."""
    ag.backward(loss)


# ------------------------------------------------------------- checkpoints

_MAGIC = b"GUDAPARM"


def save_parameters(params: Parameters, path) -> None:
    """Self-describing binary container: name, shape, row-major float64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        names = params.names()
        fh.write(len(names).to_bytes(4, "little"))
        for name in names:
            raw = name.encode("utf-8")
            t = params[name]
            fh.write(len(raw).to_bytes(2, "little"))
            fh.write(raw)
            fh.write(b"\x01" if t.requires_grad else b"\x00")
            fh.write(t.data.ndim.to_bytes(1, "little"))
            for dim in t.data.shape:
                fh.write(int(dim).to_bytes(4, "little"))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_parameters(path) -> Parameters:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ShapeError(f"{path} is not a parameter container")
        n = int.from_bytes(fh.read(4), "little")
        tensors = {}
        for _ in range(n):
            name_len = int.from_bytes(fh.read(2), "little")
            name = fh.read(name_len).decode("utf-8")
            trainable = fh.read(1) == b"\x01"
            ndim = int.from_bytes(fh.read(1), "little")
            shape = tuple(int.from_bytes(fh.read(4), "little") for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            tensors[name] = Tensor(np.array(data), requires_grad=trainable)
    return Parameters(tensors)
