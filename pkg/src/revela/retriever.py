"""Chunk encoder and in-batch similarity weighting.

The retriever is its own small causal transformer. A chunk is encoded by
prepending a role prefix ("Query: " or "Passage: "), appending ``<eos>``, and
taking the hidden state at the ``<eos>`` position. Pairwise cosine
similarities between the batch's chunks pass through a temperature softmax
over each row's off-diagonal to give the weights that drive in-batch
attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkernel as nk
from . import transformer
from .corpus import EOS_ID, PAD_ID, tokenize
from .numkernel import Tensor
from .transformer import ModelConfig, TransformerParams

QUERY_PREFIX = "Query: "
PASSAGE_PREFIX = "Passage: "
_PREFIX_IDS = {"query": tokenize(QUERY_PREFIX), "passage": tokenize(PASSAGE_PREFIX)}

NORM_GUARD = 1e-12


@dataclass
class Encoder:
    """Retriever parameters: an independent causal transformer."""
    config: ModelConfig
    params: TransformerParams

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "Encoder":
        return cls(config, transformer.init_params(config, rng))

    @property
    def d_embed(self) -> int:
        return self.config.d_model


@dataclass
class SimilarityMatrix:
    """Raw cosine scores plus the row-stochastic off-diagonal weights."""
    raw: np.ndarray   # (B, B) cosine similarities, rows are the query side
    weights: Tensor   # (B, B), zero diagonal, rows sum to 1
    tau: float


def _prepared_ids(token_ids: Sequence[int], role: str, max_seq_len: int) -> list[int]:
    """Prefix ids + (possibly truncated) text ids + <eos>; prefix and <eos> always kept."""
    if role not in _PREFIX_IDS:
        raise ValueError(f"role must be 'query' or 'passage', got {role!r}")
    ids = list(token_ids)
    if not ids:
        raise ValueError("cannot encode empty text")
    prefix = _PREFIX_IDS[role]
    budget = max_seq_len - len(prefix) - 1
    if budget < 1:
        raise ValueError("encoder max_seq_len leaves no room after the role prefix")
    return prefix + ids[:budget] + [EOS_ID]


def _encode_prepared(prepared: list[list[int]], encoder: Encoder) -> Tensor:
    """Batched forward over pre-assembled id sequences; returns <eos> states (N, d)."""
    lengths = np.array([len(p) for p in prepared])
    width = int(lengths.max())
    tokens = np.full((len(prepared), width), PAD_ID, dtype=np.int64)
    for row, ids in enumerate(prepared):
        tokens[row, :len(ids)] = ids
    pad_mask = np.arange(width)[None, :] < lengths[:, None]
    hidden = transformer.causal_stream_forward(tokens, encoder.config, encoder.params,
                                               pad_mask)
    return nk.select_positions(hidden, lengths - 1)


def encode(token_ids: Sequence[int], role: str, encoder: Encoder) -> Tensor:
    """Embed one chunk; returns the (d_embed,) hidden state at its <eos> position."""
    emb = _encode_prepared([_prepared_ids(token_ids, role, encoder.config.max_seq_len)],
                           encoder)
    return nk.reshape(emb, (encoder.d_embed,))


def encode_batch(token_id_lists: Sequence[Sequence[int]], role: str,
                 encoder: Encoder) -> Tensor:
    """Embed several chunks with the same role in one forward pass; (N, d_embed)."""
    prepared = [_prepared_ids(ids, role, encoder.config.max_seq_len)
                for ids in token_id_lists]
    return _encode_prepared(prepared, encoder)


def _unit_rows(z: Tensor) -> Tensor:
    return nk.div(z, nk.add_const(nk.l2_norm_rows(z, keepdims=True), NORM_GUARD))


def similarity_weights_from_scores(scores: Tensor, tau: float) -> Tensor:
    """Temperature softmax of each row over its off-diagonal; diagonal exactly 0."""
    b = scores.shape[0]
    if scores.data.shape != (b, b) or b < 2:
        raise ValueError("similarity scores must be square with at least two documents")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    off_diagonal = ~np.eye(b, dtype=bool)
    return nk.masked_softmax(nk.scale(scores, 1.0 / tau), off_diagonal)


def similarity_from_embeddings(row_emb: Tensor, col_emb: Tensor,
                               tau: float) -> SimilarityMatrix:
    """Cosine scores between L2-normalized rows and columns, then row softmax."""
    raw = nk.matmul(_unit_rows(row_emb), nk.transpose(_unit_rows(col_emb), (1, 0)))
    weights = similarity_weights_from_scores(raw, tau)
    return SimilarityMatrix(raw=raw.data.copy(), weights=weights, tau=tau)


def similarity_matrix(chunks: Sequence[str], encoder: Encoder, tau: float,
                      half_chunk_mode: bool = False) -> SimilarityMatrix:
    """Similarity weights for a batch of chunk texts.

    Rows (the query side) are encoded with the query role; columns (the key
    side) with the passage role. In half-chunk mode the query side sees only
    the first half of each chunk's tokens, which reduces how much of a chunk
    can condition the prediction of its own opening.
    """
    if len(chunks) < 2:
        raise ValueError("similarity needs at least two chunks")
    ids = [tokenize(text) for text in chunks]
    if any(not i for i in ids):
        raise ValueError("cannot compute similarity for an empty chunk")
    if half_chunk_mode:
        row_ids = [i[:max(1, len(i) // 2)] for i in ids]
    else:
        row_ids = ids
    max_len = encoder.config.max_seq_len
    prepared = [_prepared_ids(i, "query", max_len) for i in row_ids]
    prepared += [_prepared_ids(i, "passage", max_len) for i in ids]
    emb = _encode_prepared(prepared, encoder)
    b = len(chunks)
    row_emb = nk.slice_(emb, (slice(0, b),))
    col_emb = nk.slice_(emb, (slice(b, 2 * b),))
    return similarity_from_embeddings(row_emb, col_emb, tau)
