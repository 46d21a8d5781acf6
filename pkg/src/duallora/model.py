"""Desk-scale encoder-decoder with adapter-ready attention projections.

Pre-norm transformer blocks (RMS norms, GELU feed-forward), learned
absolute position embeddings, and one sequence at a time in row-major
[L, d_model] form. Every attention projection is an AdaptedProjection so
the adapter machinery can hook q/k/v/o without touching this module.

Encoder input is the dialogue context concatenated with the slot-prompt
tokens (prompt last by default); the mean of the prompt token embeddings
is computed once per forward and handed to every attention layer as the
prompt-branch input.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .adapters import AdaptedProjection, prompt_summary_input
from .errors import ConfigError, ContractError, ShapeError
from .rng import SeededRng
from .tensor import Tensor
from .tokenizer import BOS_ID, EOS_ID

MASK_OFF = -1e30  # additive mask value; keeps everything finite post-softmax


@dataclass
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    max_seq_len: int = 256
    prompt_position: str = "suffix"  # where the prompt sits in encoder input

    def __post_init__(self):
        extents = (self.vocab_size, self.d_model, self.n_heads, self.d_ff,
                   self.n_encoder_layers, self.n_decoder_layers, self.max_seq_len)
        if any(e < 1 for e in extents):
            raise ConfigError(f"all extents must be >= 1: {self}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.prompt_position not in ("suffix", "prefix"):
            raise ConfigError(f"unknown prompt_position {self.prompt_position!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionTrace:
    """Post-softmax weights of one head, with the prompt key span."""
    layer: int
    head: int
    weights: np.ndarray  # [query position, key position]
    prompt_start: int
    prompt_end: int

    @property
    def boundary(self) -> int:
        """Key index where the prompt begins (suffix layout)."""
        return self.prompt_start


def prompt_attention_mass(weights: np.ndarray, boundary: int) -> float:
    """Mean, over context-query rows, of attention falling on prompt keys.

    ``boundary`` is the key position where the prompt begins; rows below it
    are the context queries. Returns 0.0 when there are no prompt keys or
    no context queries.
    """
    n_keys = weights.shape[1]
    if not 0 <= boundary <= n_keys:
        raise ContractError(
            f"boundary {boundary} out of range for {n_keys} key positions")
    if boundary == 0 or boundary == n_keys:
        return 0.0
    return float(weights[:boundary, boundary:].sum(axis=1).mean())


def trace_prompt_mass(trace: AttentionTrace) -> float:
    """prompt_attention_mass generalized to either prompt placement."""
    lo, hi = trace.prompt_start, trace.prompt_end
    n = trace.weights.shape[0]
    context_rows = [i for i in range(n) if not lo <= i < hi]
    if not context_rows or lo == hi:
        return 0.0
    return float(trace.weights[context_rows, lo:hi].sum(axis=1).mean())


def _linear_params(rng: SeededRng, d_out: int, d_in: int) -> tuple[Tensor, Tensor]:
    W = Tensor(rng.normal((d_out, d_in), std=1.0 / np.sqrt(d_in)))
    b = Tensor(np.zeros(d_out))
    return W, b


class MultiHeadAttention:
    def __init__(self, d_model: int, n_heads: int, rng: SeededRng):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        for kind in "qkvo":
            W, b = _linear_params(rng.derive(kind), d_model, d_model)
            setattr(self, kind, AdaptedProjection(W, b))

    def __call__(self, x_q: Tensor, x_kv: Tensor, p: Tensor | None = None,
                 mask: np.ndarray | None = None,
                 trace_sink: list | None = None, layer: int = 0,
                 prompt_span: tuple[int, int] = (0, 0)) -> Tensor:
        Q = self.q(x_q, p)
        K = self.k(x_kv, p)
        V = self.v(x_kv, p)
        mask_t = Tensor(mask) if mask is not None else None
        heads = []
        inv_sqrt = 1.0 / np.sqrt(self.d_head)
        for h in range(self.n_heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            scores = T.mul(T.matmul(T.slice_cols(Q, lo, hi),
                                    T.transpose(T.slice_cols(K, lo, hi))), inv_sqrt)
            if mask_t is not None:
                scores = T.add(scores, mask_t)
            probs = T.softmax(scores, axis=-1)
            if trace_sink is not None:
                trace_sink.append(AttentionTrace(
                    layer=layer, head=h, weights=probs.data.copy(),
                    prompt_start=prompt_span[0], prompt_end=prompt_span[1]))
            heads.append(T.matmul(probs, T.slice_cols(V, lo, hi)))
        return self.o(T.concat_cols(heads), p)


class FeedForward:
    def __init__(self, d_model: int, d_ff: int, rng: SeededRng):
        self.W1, self.b1 = _linear_params(rng.derive("w1"), d_ff, d_model)
        self.W2, self.b2 = _linear_params(rng.derive("w2"), d_model, d_ff)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = T.gelu(T.add(T.matmul(x, T.transpose(self.W1)), self.b1))
        return T.add(T.matmul(hidden, T.transpose(self.W2)), self.b2)


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        self.norm1 = Tensor(np.ones(cfg.d_model))
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.derive("attn"))
        self.norm2 = Tensor(np.ones(cfg.d_model))
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng.derive("ffn"))

    def __call__(self, x, p, trace_sink, layer, prompt_span):
        normed = T.layer_norm(x, self.norm1)
        x = T.add(x, self.attn(normed, normed, p, trace_sink=trace_sink,
                               layer=layer, prompt_span=prompt_span))
        return T.add(x, self.ffn(T.layer_norm(x, self.norm2)))


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        self.norm1 = Tensor(np.ones(cfg.d_model))
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.derive("self"))
        self.norm2 = Tensor(np.ones(cfg.d_model))
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.derive("cross"))
        self.norm3 = Tensor(np.ones(cfg.d_model))
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng.derive("ffn"))

    def __call__(self, x, enc_states, p, causal_mask):
        normed = T.layer_norm(x, self.norm1)
        x = T.add(x, self.self_attn(normed, normed, p, mask=causal_mask))
        x = T.add(x, self.cross_attn(T.layer_norm(x, self.norm2), enc_states, p))
        return T.add(x, self.ffn(T.layer_norm(x, self.norm3)))


class Seq2SeqModel:
    """Fresh instances are in inference mode (no gradient recording);
    the training entry points flip requires_grad on before optimizing."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = SeededRng(seed).derive("model")
        d = config.d_model
        self.embedding = Tensor(
            rng.derive("embedding").normal((config.vocab_size, d), std=1.0))
        self.pos_embedding = Tensor(
            rng.derive("positions").normal((config.max_seq_len, d), std=0.2))
        self.encoder_layers = [EncoderLayer(config, rng.derive(f"enc.{i}"))
                               for i in range(config.n_encoder_layers)]
        self.decoder_layers = [DecoderLayer(config, rng.derive(f"dec.{i}"))
                               for i in range(config.n_decoder_layers)]
        self.encoder_norm = Tensor(np.ones(d))
        self.decoder_norm = Tensor(np.ones(d))
        self.lm_W, self.lm_b = _linear_params(rng.derive("lm_head"),
                                              config.vocab_size, d)

    # -- parameter walks ----------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding, "pos_embedding": self.pos_embedding,
               "encoder.final_norm": self.encoder_norm,
               "decoder.final_norm": self.decoder_norm,
               "lm_head.W": self.lm_W, "lm_head.b": self.lm_b}

        def add_mha(prefix, mha):
            for kind in "qkvo":
                proj = getattr(mha, kind)
                out[f"{prefix}.{kind}.W"] = proj.W
                out[f"{prefix}.{kind}.b"] = proj.b

        for i, layer in enumerate(self.encoder_layers):
            out[f"encoder.{i}.norm1"] = layer.norm1
            add_mha(f"encoder.{i}.attn", layer.attn)
            out[f"encoder.{i}.norm2"] = layer.norm2
            out[f"encoder.{i}.ffn.W1"] = layer.ffn.W1
            out[f"encoder.{i}.ffn.b1"] = layer.ffn.b1
            out[f"encoder.{i}.ffn.W2"] = layer.ffn.W2
            out[f"encoder.{i}.ffn.b2"] = layer.ffn.b2
        for i, layer in enumerate(self.decoder_layers):
            out[f"decoder.{i}.norm1"] = layer.norm1
            add_mha(f"decoder.{i}.self_attn", layer.self_attn)
            out[f"decoder.{i}.norm2"] = layer.norm2
            add_mha(f"decoder.{i}.cross_attn", layer.cross_attn)
            out[f"decoder.{i}.norm3"] = layer.norm3
            out[f"decoder.{i}.ffn.W1"] = layer.ffn.W1
            out[f"decoder.{i}.ffn.b1"] = layer.ffn.b1
            out[f"decoder.{i}.ffn.W2"] = layer.ffn.W2
            out[f"decoder.{i}.ffn.b2"] = layer.ffn.b2
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def attention_blocks(self):
        """Yields (name, attention module, lives-in-decoder) for every block."""
        for i, layer in enumerate(self.encoder_layers):
            yield f"encoder.{i}.attn", layer.attn, False
        for i, layer in enumerate(self.decoder_layers):
            yield f"decoder.{i}.self_attn", layer.self_attn, True
            yield f"decoder.{i}.cross_attn", layer.cross_attn, True

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_tensors()
        missing = set(own) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint missing tensors: {sorted(missing)[:3]}")
        for name, t in own.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint {arrays[name].shape} vs {t.shape}")
            t.data[...] = arrays[name]

    # -- forward ------------------------------------------------------------

    def _arrange_input(self, context_ids: list[int], prompt_ids: list[int]):
        """Concatenate context and prompt, truncating old context if needed."""
        budget = self.config.max_seq_len - len(prompt_ids)
        if budget < 0:
            raise ContractError(
                f"prompt of {len(prompt_ids)} tokens exceeds max_seq_len "
                f"{self.config.max_seq_len}; prompts are never truncated")
        context_ids = list(context_ids)[max(0, len(context_ids) - budget):]
        if self.config.prompt_position == "suffix":
            ids = context_ids + list(prompt_ids)
            span = (len(context_ids), len(ids))
        else:
            ids = list(prompt_ids) + context_ids
            span = (0, len(prompt_ids))
        return ids, span

    def encode(self, context_ids: list[int], prompt_ids: list[int],
               trace_sink: list | None = None):
        """Returns (hidden states [L, d], prompt summary or None, prompt span)."""
        ids, span = self._arrange_input(context_ids, prompt_ids)
        if not ids:
            raise ContractError("encoder input is empty")
        x = T.add(T.embedding_lookup(self.embedding, ids),
                  T.embedding_lookup(self.pos_embedding, np.arange(len(ids))))
        summary = None
        if prompt_ids:
            summary = prompt_summary_input(
                T.embedding_lookup(self.embedding, prompt_ids))
        for i, layer in enumerate(self.encoder_layers):
            x = layer(x, summary, trace_sink, i, span)
        return T.layer_norm(x, self.encoder_norm), summary, span

    def decode_logits(self, decoder_ids: list[int], enc_states: Tensor,
                      summary: Tensor | None) -> Tensor:
        n = len(decoder_ids)
        if n > self.config.max_seq_len:
            raise ContractError(f"decoder input of {n} exceeds max_seq_len")
        x = T.add(T.embedding_lookup(self.embedding, decoder_ids),
                  T.embedding_lookup(self.pos_embedding, np.arange(n)))
        causal = np.triu(np.full((n, n), MASK_OFF), k=1)
        for layer in self.decoder_layers:
            x = layer(x, enc_states, summary, causal)
        x = T.layer_norm(x, self.decoder_norm)
        return T.add(T.matmul(x, T.transpose(self.lm_W)), self.lm_b)

    def loss(self, context_ids, prompt_ids, target_ids) -> Tensor:
        """Teacher-forced cross entropy; targets must end with EOS."""
        enc, summary, _ = self.encode(context_ids, prompt_ids)
        decoder_in = [BOS_ID] + list(target_ids[:-1])
        logits = self.decode_logits(decoder_in, enc, summary)
        return T.cross_entropy(logits, target_ids)

    def greedy_decode(self, enc_states: Tensor, summary: Tensor | None,
                      max_new_tokens: int) -> list[int]:
        """Argmax decoding; ties resolve to the lowest token id."""
        prefix = [BOS_ID]
        out: list[int] = []
        for _ in range(max_new_tokens):
            logits = self.decode_logits(prefix, enc_states, summary)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS_ID:
                break
            out.append(nxt)
            prefix.append(nxt)
        return out

    def generate(self, context_ids, prompt_ids, max_new_tokens: int) -> list[int]:
        enc, summary, _ = self.encode(context_ids, prompt_ids)
        return self.greedy_decode(enc, summary, max_new_tokens)


def capture_attention(model: Seq2SeqModel, context_ids, prompt_ids) -> list[AttentionTrace]:
    """Run the encoder with tracing on and return every head's weights."""
    traces: list[AttentionTrace] = []
    model.encode(context_ids, prompt_ids, trace_sink=traces)
    return traces
