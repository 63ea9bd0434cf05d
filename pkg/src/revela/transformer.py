"""Dual-stream decoder blocks with similarity-weighted cross-document attention.

Each document in a batch carries two activation streams through every layer:
a self-only stream that sees just its own prefix (and supplies cached
keys/values to the rest of the batch), and a batch-conditioned stream whose
causal self-attention output is combined with value-norm-regularized
cross-document attention over the other documents, weighted by retriever
similarity. The batch-conditioned stream produces the training logits.

Blocks are pre-norm residual with a SiLU feed-forward; projection, norm and
feed-forward weights are shared between the two streams. Positional
embeddings are learned absolute, so cached keys keep their source-document
positions in cross attention. The output projection is tied to the token
embedding table.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numkernel as nk
from .corpus import PAD_ID
from .numkernel import Tensor

SIM_ROW_SUM_TOL = 1e-6


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    vocab_size: int = 258
    max_seq_len: int = 160
    epsilon: float = 1e-6
    v_normalization_enabled: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "ln2_gain",
                     "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield name, getattr(self, name)


@dataclass
class TransformerParams:
    token_embedding: Tensor
    position_embedding: Tensor
    layers: list[LayerParams]
    final_gain: Tensor
    final_bias: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_tensors():
                yield f"layers.{i}.{name}", t
        yield "final_gain", self.final_gain
        yield "final_bias", self.final_bias

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


@dataclass
class DualStreamState:
    """Per-layer activations: the self-only stream and the batch-conditioned stream.

    Key/value caches computed for the self stream's own attention are consumed
    by cross-document attention inside the same block. The combined causal/pad
    attention mask is identical for every layer, so it is built once.
    """
    self_stream: Tensor
    mixed_stream: Tensor
    pad_mask: np.ndarray  # (B, L), True at real tokens
    attn_mask: np.ndarray | None = None  # (B, 1, L, L), causal & key-not-pad

    @classmethod
    def initial(cls, embedded: Tensor, pad_mask: np.ndarray) -> "DualStreamState":
        return cls(embedded, embedded, pad_mask, _self_attn_mask(pad_mask))


def init_params(config: ModelConfig, rng: np.random.Generator) -> TransformerParams:
    d, dff = config.d_model, config.d_ff
    w_std = d ** -0.5

    def weight(shape, std):
        return nk.parameter(rng.normal(0.0, std, shape))

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            wq=weight((d, d), w_std), wk=weight((d, d), w_std),
            wv=weight((d, d), w_std), wo=weight((d, d), w_std),
            ln1_gain=nk.parameter(np.ones(d)), ln1_bias=nk.parameter(np.zeros(d)),
            ln2_gain=nk.parameter(np.ones(d)), ln2_bias=nk.parameter(np.zeros(d)),
            ffn_w1=weight((d, dff), w_std), ffn_b1=nk.parameter(np.zeros(dff)),
            ffn_w2=weight((dff, d), dff ** -0.5), ffn_b2=nk.parameter(np.zeros(d)),
        ))
    return TransformerParams(
        token_embedding=weight((config.vocab_size, d), 0.1),
        position_embedding=weight((config.max_seq_len, d), 0.1),
        layers=layers,
        final_gain=nk.parameter(np.ones(d)),
        final_bias=nk.parameter(np.zeros(d)),
    )


@dataclass
class LanguageModel:
    config: ModelConfig
    params: TransformerParams

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "LanguageModel":
        return cls(config, init_params(config, rng))


# ---------------------------------------------------------------------------
# forward pieces


@functools.lru_cache(maxsize=32)
def _causal_allowed(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _full_mask(tokens: np.ndarray) -> np.ndarray:
    return np.ones(tokens.shape, dtype=bool)


def embed(tokens: np.ndarray, config: ModelConfig, params: TransformerParams) -> Tensor:
    """Token embedding plus learned absolute position embedding, (B, L, d)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("embed expects (batch, length) token ids")
    batch, length = tokens.shape
    if length < 1:
        raise ValueError("embed: empty sequence")
    if length > config.max_seq_len:
        raise ValueError(f"sequence length {length} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    tok = nk.embedding_lookup(params.token_embedding, tokens)
    pos = nk.slice_(params.position_embedding, (slice(0, length),))
    return nk.add(tok, pos)


def _split_heads(x: Tensor, config: ModelConfig) -> Tensor:
    b, length, _ = x.shape
    return nk.transpose(nk.reshape(x, (b, length, config.n_heads, config.d_head)),
                        (0, 2, 1, 3))


def _merge_heads(x: Tensor, config: ModelConfig) -> Tensor:
    b, _, length, _ = x.shape
    return nk.reshape(nk.transpose(x, (0, 2, 1, 3)), (b, length, config.d_model))


def _attention_heads(x: Tensor, layer: LayerParams, config: ModelConfig):
    q = _split_heads(nk.matmul(x, layer.wq), config)
    k = _split_heads(nk.matmul(x, layer.wk), config)
    v = _split_heads(nk.matmul(x, layer.wv), config)
    return q, k, v


def _self_attn_mask(pad_mask: np.ndarray) -> np.ndarray:
    length = pad_mask.shape[1]
    return _causal_allowed(length)[None, None] & pad_mask[:, None, None, :]


def _causal_attend(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray,
                   config: ModelConfig) -> Tensor:
    scores = nk.scale(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))),
                      1.0 / math.sqrt(config.d_head))
    weights = nk.masked_softmax(scores, allowed)
    return _merge_heads(nk.matmul(weights, v), config)


def causal_self_attention(x: Tensor, pad_mask: np.ndarray, layer: LayerParams,
                          config: ModelConfig):
    """Multi-head causal attention over non-pad positions.

    Returns the merged head outputs (before the output projection) together
    with the per-head key/value tensors for reuse by cross-document attention.
    """
    if not pad_mask.any(axis=1).all():
        raise ValueError("causal_self_attention: a document is fully padded")
    q, k, v = _attention_heads(x, layer, config)
    return _causal_attend(q, k, v, _self_attn_mask(pad_mask), config), k, v


def cross_doc_attention(queries: Tensor, keys: Tensor, values: Tensor,
                        key_pad: np.ndarray, config: ModelConfig):
    """Full (non-causal) attention of every query document over every key document.

    ``queries`` is (I, H, L, d_head); ``keys``/``values`` are (J, H, M, d_head)
    caches from the self stream of the same layer. Pad positions of the key
    documents are excluded. Returns the per-pair context (I, J, H, L, d_head)
    and the softmax weights (I, J, H, L, M) that produced it.
    """
    i_docs, heads, q_len, d_head = queries.shape
    j_docs, heads_k, k_len, d_head_k = keys.shape
    if (heads, d_head) != (heads_k, d_head_k) or values.shape != keys.shape:
        raise ValueError("cross_doc_attention: cache shapes do not match queries")
    if not key_pad.any(axis=1).all():
        raise ValueError("cross_doc_attention: a key document is fully padded")
    qx = nk.reshape(queries, (i_docs, 1, heads, q_len, d_head))
    kx = nk.transpose(nk.reshape(keys, (1, j_docs, heads, k_len, d_head)),
                      (0, 1, 2, 4, 3))
    scores = nk.scale(nk.matmul(qx, kx), 1.0 / math.sqrt(d_head))
    allowed = key_pad[None, :, None, None, :]
    weights = nk.masked_softmax(scores, allowed)
    context = nk.matmul(weights, nk.reshape(values, (1, j_docs, heads, k_len, d_head)))
    return context, weights


def v_normalize(context: Tensor, weights: Tensor, values: Tensor,
                epsilon: float) -> Tensor:
    """Divide each context row by the attention-weighted mean value-row norm plus epsilon.

    ``weights`` must be the exact softmax weights that produced ``context``;
    the weighted norm average then keeps any single large value row from
    dominating the cross-document output.
    """
    j_docs, heads, k_len, _ = values.shape
    norms = nk.l2_norm_rows(values)  # (J, H, M)
    norm_avg = nk.matmul(weights, nk.reshape(norms, (1, j_docs, heads, k_len, 1)))
    return nk.div(context, nk.add_const(norm_avg, epsilon))


def weighted_aggregate(context: Tensor, sim: Tensor) -> Tensor:
    """Similarity-weighted sum over key documents: (B, B, H, L, d) -> (B, H, L, d).

    Each row of ``sim`` must sum to 1 (+/- 1e-6) over the off-diagonal with an
    exactly zero diagonal. An all-zero row is accepted as a test hook that
    switches the cross contribution off for that document.
    """
    b = context.shape[0]
    if sim.data.shape != (b, b) or context.shape[1] != b:
        raise ValueError(f"weighted_aggregate: similarity shape {sim.data.shape} "
                         f"does not match {b} documents")
    if np.any(sim.data.diagonal() != 0.0):
        raise ValueError("weighted_aggregate: similarity diagonal must be exactly 0")
    row_sums = sim.data.sum(axis=1)
    degenerate = ~sim.data.any(axis=1)
    if np.any(~degenerate & (np.abs(row_sums - 1.0) > SIM_ROW_SUM_TOL)):
        raise ValueError("weighted_aggregate: similarity rows must sum to 1")
    weighted = nk.mul(context, nk.reshape(sim, (b, b, 1, 1, 1)))
    return nk.sum_axis(weighted, axis=1)


def _ffn(x: Tensor, layer: LayerParams) -> Tensor:
    hidden = nk.silu(nk.add(nk.matmul(x, layer.ffn_w1), layer.ffn_b1))
    return nk.add(nk.matmul(hidden, layer.ffn_w2), layer.ffn_b2)


def in_batch_block_forward(state: DualStreamState, sim: Tensor, config: ModelConfig,
                           layer: LayerParams) -> DualStreamState:
    """One pre-norm residual block over both streams.

    The self stream runs a plain causal block and exposes its key/value
    caches. The batch-conditioned stream adds, before the shared output
    projection, the similarity-weighted cross-document context (value-norm
    regularized unless disabled) to its own causal attention output.
    """
    batch = state.self_stream.shape[0]
    if batch < 2:
        raise ValueError("in-batch attention needs at least two documents")
    pad = state.pad_mask
    allowed = state.attn_mask if state.attn_mask is not None else _self_attn_mask(pad)
    if not pad.any(axis=1).all():
        raise ValueError("in_batch_block_forward: a document is fully padded")

    e_norm = nk.layernorm(state.self_stream, layer.ln1_gain, layer.ln1_bias)
    q_e, k_cache, v_cache = _attention_heads(e_norm, layer, config)
    e_att = _causal_attend(q_e, k_cache, v_cache, allowed, config)
    e_mid = nk.add(state.self_stream, nk.matmul(e_att, layer.wo))
    e_out = nk.add(e_mid, _ffn(nk.layernorm(e_mid, layer.ln2_gain, layer.ln2_bias), layer))

    h_norm = nk.layernorm(state.mixed_stream, layer.ln1_gain, layer.ln1_bias)
    q_h, k_h, v_h = _attention_heads(h_norm, layer, config)
    self_part = _causal_attend(q_h, k_h, v_h, allowed, config)
    context, weights = cross_doc_attention(q_h, k_cache, v_cache, pad, config)
    if config.v_normalization_enabled:
        context = v_normalize(context, weights, v_cache, config.epsilon)
    cross_part = _merge_heads(weighted_aggregate(context, sim), config)
    h_mid = nk.add(state.mixed_stream,
                   nk.matmul(nk.add(self_part, cross_part), layer.wo))
    h_out = nk.add(h_mid, _ffn(nk.layernorm(h_mid, layer.ln2_gain, layer.ln2_bias), layer))

    return DualStreamState(e_out, h_out, pad, allowed)


def lm_forward(tokens: np.ndarray, sim: Tensor, config: ModelConfig,
               params: TransformerParams, pad_mask: np.ndarray | None = None):
    """Run the dual-stream stack; returns (mixed_logits, self_logits), each (B, L, V).

    The mixed-stream logits condition each next-token prediction on the
    document's own prefix plus every other document in the batch; the
    self-stream logits are a pure per-document function.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ValueError("lm_forward expects at least two documents")
    pad = _full_mask(tokens) if pad_mask is None else np.asarray(pad_mask, dtype=bool)

    x = embed(tokens, config, params)
    state = DualStreamState.initial(x, pad)
    for layer in params.layers:
        state = in_batch_block_forward(state, sim, config, layer)
    mixed = nk.layernorm(state.mixed_stream, params.final_gain, params.final_bias)
    self_only = nk.layernorm(state.self_stream, params.final_gain, params.final_bias)
    tied = nk.transpose(params.token_embedding, (1, 0))
    return nk.matmul(mixed, tied), nk.matmul(self_only, tied)


def fused_mask_forward(tokens: np.ndarray, sim: Tensor, config: ModelConfig,
                       params: TransformerParams, pad_mask: np.ndarray | None = None):
    """Optimized path: duplicate every document and share one projection pass.

    The batch is stacked twice (self copies first, batch-conditioned copies
    second) so each layer projects queries/keys/values for both streams in a
    single call; block masks route the second copies' queries over the first
    copies' caches. Matches ``lm_forward`` elementwise.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ValueError("fused_mask_forward expects at least two documents")
    batch, length = tokens.shape
    pad = _full_mask(tokens) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    stacked = np.concatenate([tokens, tokens], axis=0)
    pad2 = np.concatenate([pad, pad], axis=0)

    x = embed(stacked, config, params)
    allowed2 = _self_attn_mask(pad2)
    for layer in params.layers:
        x_norm = nk.layernorm(x, layer.ln1_gain, layer.ln1_bias)
        q, k, v = _attention_heads(x_norm, layer, config)
        att = _causal_attend(q, k, v, allowed2, config)
        q_mixed = nk.slice_(q, (slice(batch, 2 * batch),))
        k_self = nk.slice_(k, (slice(0, batch),))
        v_self = nk.slice_(v, (slice(0, batch),))
        context, weights = cross_doc_attention(q_mixed, k_self, v_self, pad, config)
        if config.v_normalization_enabled:
            context = v_normalize(context, weights, v_self, config.epsilon)
        cross_part = _merge_heads(weighted_aggregate(context, sim), config)
        att_self = nk.slice_(att, (slice(0, batch),))
        att_mixed = nk.add(nk.slice_(att, (slice(batch, 2 * batch),)), cross_part)
        x = nk.add(x, nk.matmul(nk.concat([att_self, att_mixed], axis=0), layer.wo))
        x = nk.add(x, _ffn(nk.layernorm(x, layer.ln2_gain, layer.ln2_bias), layer))

    final = nk.layernorm(x, params.final_gain, params.final_bias)
    tied = nk.transpose(params.token_embedding, (1, 0))
    logits = nk.matmul(final, tied)
    mixed = nk.slice_(logits, (slice(batch, 2 * batch),))
    self_only = nk.slice_(logits, (slice(0, batch),))
    return mixed, self_only


def causal_stream_forward(tokens: np.ndarray, config: ModelConfig,
                          params: TransformerParams,
                          pad_mask: np.ndarray | None = None) -> Tensor:
    """Plain single-stream causal forward; returns final hidden states (B, L, d)."""
    tokens = np.asarray(tokens)
    pad = _full_mask(tokens) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if not pad.any(axis=1).all():
        raise ValueError("causal_stream_forward: a document is fully padded")
    allowed = _self_attn_mask(pad)
    x = embed(tokens, config, params)
    for layer in params.layers:
        x_norm = nk.layernorm(x, layer.ln1_gain, layer.ln1_bias)
        q, k, v = _attention_heads(x_norm, layer, config)
        x = nk.add(x, nk.matmul(_causal_attend(q, k, v, allowed, config), layer.wo))
        x = nk.add(x, _ffn(nk.layernorm(x, layer.ln2_gain, layer.ln2_bias), layer))
    return nk.layernorm(x, params.final_gain, params.final_bias)


def causal_lm_logits(tokens: np.ndarray, config: ModelConfig,
                     params: TransformerParams,
                     pad_mask: np.ndarray | None = None) -> Tensor:
    hidden = causal_stream_forward(tokens, config, params, pad_mask)
    return nk.matmul(hidden, nk.transpose(params.token_embedding, (1, 0)))
