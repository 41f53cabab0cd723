"""Learnable building blocks: utterance encoder, relational graph layers,
label projection, decoders, and the task-specific sequence encoders.

Row-vector convention throughout: hidden states are matrix rows and
parameters right-multiply, so ``H @ w`` realizes the usual ``W h`` products.
"""
from __future__ import annotations

import numpy as np

from darer.graphs import RelationalGraph
from darer.tensor import (
    LstmParams,
    ShapeError,
    Tensor,
    concat,
    dropout,
    gather_rows,
    glorot,
    layer_norm,
    lstm_sequence,
    masked_softmax,
    matmul,
    matmul_nt,
    max_pool_time,
    relu,
    softmax_rows,
    stack_rows,
)


class BiLstm:
    """Bidirectional LSTM over an (L, d_in) sequence, outputs (L, 2*hidden)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = LstmParams.init(d_in, hidden, rng)
        self.bwd = LstmParams.init(d_in, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return concat([lstm_sequence(x, self.fwd),
                       lstm_sequence(x, self.bwd, reverse=True)], axis=1)

    def parameters(self):
        for name, p in self.fwd.parameters():
            yield f"fwd.{name}", p
        for name, p in self.bwd.parameters():
            yield f"bwd.{name}", p


class UtteranceEncoder:
    """Token embeddings -> BiLSTM -> max pooling over time, per utterance."""

    def __init__(self, vocab_size: int, word_dim: int, hidden_dim: int,
                 rng: np.random.Generator,
                 embedding_init: np.ndarray | None = None):
        if hidden_dim % 2 != 0:
            raise ValueError(f"hidden_dim must be even for a BiLSTM encoder, got {hidden_dim}")
        if embedding_init is None:
            embedding_init = rng.uniform(-0.1, 0.1, size=(vocab_size, word_dim))
        self.embeddings = Tensor(embedding_init, requires_grad=True)
        self.bilstm = BiLstm(word_dim, hidden_dim // 2, rng)

    def encode_dialog(self, token_ids: list[np.ndarray]) -> Tensor:
        """Encode N utterances (lists of token ids) into an (N, d) matrix."""
        pooled = []
        for ids in token_ids:
            if len(ids) == 0:
                raise ValueError("utterance with no tokens reached the encoder")
            words = gather_rows(self.embeddings, ids)
            pooled.append(max_pool_time(self.bilstm(words)))
        return stack_rows(pooled)

    def parameters(self):
        yield "embeddings", self.embeddings
        for name, p in self.bilstm.parameters():
            yield f"bilstm.{name}", p


class SeqBiLstm:
    """Sequence-level BiLSTM over utterance rows, projected back to width d.

    Used both for the task-specific encoders that precede the decoders and
    for the initial task-splitting pass.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2 != 0:
            raise ValueError(f"dim must be even for a BiLSTM, got {dim}")
        self.bilstm = BiLstm(dim, dim // 2, rng)
        self.w_out = Tensor(glorot(rng, dim, dim), requires_grad=True)
        self.b_out = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        return matmul(self.bilstm(h), self.w_out) + self.b_out

    def parameters(self):
        for name, p in self.bilstm.parameters():
            yield name, p
        yield "w_out", self.w_out
        yield "b_out", self.b_out


class RgcnLayer:
    """Per-relation linear aggregation with mean normalization plus a self term.

    For each node: its own state through the self matrix, plus, for every
    relation, the mean of its in-neighbors' states through that relation's
    matrix.  No bias and no activation, so the layer is linear in its input.
    """

    def __init__(self, dim: int, num_relations: int, rng: np.random.Generator):
        self.num_relations = num_relations
        self.w_self = Tensor(glorot(rng, dim, dim), requires_grad=True)
        self.w_rel = [Tensor(glorot(rng, dim, dim), requires_grad=True)
                      for _ in range(num_relations)]

    def __call__(self, graph: RelationalGraph, h: Tensor) -> Tensor:
        if h.data.shape[0] != graph.num_nodes:
            raise ShapeError(f"graph has {graph.num_nodes} nodes but input has "
                             f"{h.data.shape[0]} rows")
        if graph.num_relations != self.num_relations:
            raise ShapeError(f"layer holds {self.num_relations} relation matrices "
                             f"but graph has {graph.num_relations} relations")
        out = matmul(h, self.w_self)
        for r in range(1, graph.num_relations + 1):
            mask = graph.in_mask(r)
            counts = mask.sum(axis=1)
            if not counts.any():
                continue
            norm = mask / np.maximum(counts, 1)[:, None]
            out = out + matmul(matmul(Tensor(norm), h), self.w_rel[r - 1])
        return out

    def parameters(self):
        yield "w_self", self.w_self
        for r, p in enumerate(self.w_rel, start=1):
            yield f"w_rel.{r}", p


class ReTeFormerLayer:
    """Relational temporal attention: one head per relation, disentangled
    content/position correlations, adjacency used as a 2-D attention mask.

    Per relation r the raw score of key node j for query node i is
    ``(h_i Wq_r)(h_j Wk_r)^T / sqrt(d) + (p_i Uq_r)(p_j Uk_r)^T / sqrt(d)``
    with separate projections for hidden states and position embeddings.
    Scores survive only where j is an in-neighbor of i under r; rows with no
    survivors normalize to zero, so isolated heads add nothing.  The summed
    head outputs then pass through the usual residual + layer norm +
    feed-forward + layer norm stack.
    """

    def __init__(self, dim: int, num_relations: int, max_positions: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.num_relations = num_relations
        self.max_positions = max_positions
        self.scale = 1.0 / np.sqrt(dim)
        self.w_query = [Tensor(glorot(rng, dim, dim), requires_grad=True)
                        for _ in range(num_relations)]
        self.w_key = [Tensor(glorot(rng, dim, dim), requires_grad=True)
                      for _ in range(num_relations)]
        self.w_value = [Tensor(glorot(rng, dim, dim), requires_grad=True)
                        for _ in range(num_relations)]
        self.u_query = [Tensor(glorot(rng, dim, dim), requires_grad=True)
                        for _ in range(num_relations)]
        self.u_key = [Tensor(glorot(rng, dim, dim), requires_grad=True)
                      for _ in range(num_relations)]
        self.position_table = Tensor(rng.normal(0.0, 0.02, size=(max_positions, dim)),
                                     requires_grad=True)
        self.ln1_gain = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.ff_w1 = Tensor(glorot(rng, dim, 4 * dim), requires_grad=True)
        self.ff_b1 = Tensor(np.zeros(4 * dim), requires_grad=True)
        self.ff_w2 = Tensor(glorot(rng, 4 * dim, dim), requires_grad=True)
        self.ff_b2 = Tensor(np.zeros(dim), requires_grad=True)

    def _positions(self, positions: np.ndarray) -> Tensor:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.max(initial=0) >= self.max_positions:
            raise ValueError(
                f"position {int(positions.max())} exceeds the position table "
                f"capacity {self.max_positions}; raise max_dialog_len")
        return gather_rows(self.position_table, positions)

    def scores(self, h: Tensor, positions: np.ndarray, relation_id: int) -> Tensor:
        """Unmasked score matrix of one relation head."""
        pos = self._positions(positions)
        return self._head_scores(h, pos, relation_id)

    def _head_scores(self, h: Tensor, pos: Tensor, relation_id: int) -> Tensor:
        r = relation_id - 1
        content = matmul_nt(matmul(h, self.w_query[r]),
                            matmul(h, self.w_key[r]))
        position = matmul_nt(matmul(pos, self.u_query[r]),
                             matmul(pos, self.u_key[r]))
        return (content + position) * self.scale

    def __call__(self, graph: RelationalGraph, h: Tensor, positions: np.ndarray,
                 attn_dropout: float = 0.0, rng: np.random.Generator | None = None,
                 collect_attention: bool = False):
        """Returns the updated (M, d) node states and, on request, the
        per-relation attention maps (list of numpy arrays, pre-dropout)."""
        if h.data.shape[0] != graph.num_nodes:
            raise ShapeError(f"graph has {graph.num_nodes} nodes but input has "
                             f"{h.data.shape[0]} rows")
        pos = self._positions(positions)
        aggregated = None
        maps = [] if collect_attention else None
        for relation_id in range(1, graph.num_relations + 1):
            raw = self._head_scores(h, pos, relation_id)
            alpha = masked_softmax(raw, graph.in_mask(relation_id))
            if collect_attention:
                maps.append(alpha.data.copy())
            if attn_dropout > 0.0:
                alpha = dropout(alpha, attn_dropout, rng)
            sub = matmul(alpha, matmul(h, self.w_value[relation_id - 1]))
            aggregated = sub if aggregated is None else aggregated + sub
        normed = layer_norm(h + aggregated, self.ln1_gain, self.ln1_bias)
        ff = matmul(relu(matmul(normed, self.ff_w1) + self.ff_b1), self.ff_w2) + self.ff_b2
        out = layer_norm(normed + ff, self.ln2_gain, self.ln2_bias)
        return out, maps

    def parameters(self):
        for r in range(self.num_relations):
            yield f"w_query.{r + 1}", self.w_query[r]
            yield f"w_key.{r + 1}", self.w_key[r]
            yield f"w_value.{r + 1}", self.w_value[r]
            yield f"u_query.{r + 1}", self.u_query[r]
            yield f"u_key.{r + 1}", self.u_key[r]
        yield "position_table", self.position_table
        yield "ln1_gain", self.ln1_gain
        yield "ln1_bias", self.ln1_bias
        yield "ln2_gain", self.ln2_gain
        yield "ln2_bias", self.ln2_bias
        yield "ff_w1", self.ff_w1
        yield "ff_b1", self.ff_b1
        yield "ff_w2", self.ff_w2
        yield "ff_b2", self.ff_b2


class LabelEmbeddings:
    """One learned embedding row per label class."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(glorot(rng, num_classes, dim), requires_grad=True)

    def project(self, p: Tensor) -> Tensor:
        """Expected label embedding under a distribution: rows of p times the table.

        Each row of ``p`` must be a probability vector; a one-hot row returns
        exactly its class embedding.
        """
        rowsums = p.data.sum(axis=-1)
        bad = np.flatnonzero(np.abs(rowsums - 1.0) > 1e-6)
        if bad.size:
            raise ValueError(f"label distribution row {int(bad[0])} sums to "
                             f"{rowsums[bad[0]]:.8f}, expected 1")
        return matmul(p, self.table)

    def parameters(self):
        yield "table", self.table


class Decoder:
    """Affine map to class scores followed by a row softmax."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.w = Tensor(glorot(rng, dim, num_classes), requires_grad=True)
        self.b = Tensor(np.zeros(num_classes), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        return softmax_rows(matmul(h, self.w) + self.b)

    def parameters(self):
        yield "w", self.w
        yield "b", self.b


def superimpose(hidden: Tensor, e_sent: Tensor, e_act: Tensor) -> Tensor:
    """Add both tasks' label representations onto a node's hidden state."""
    if hidden.shape != e_sent.shape or hidden.shape != e_act.shape:
        raise ShapeError(f"superimpose needs equal shapes, got {hidden.shape}, "
                         f"{e_sent.shape}, {e_act.shape}")
    return hidden + e_sent + e_act


def decompose_score(layer: ReTeFormerLayer, relation_id: int,
                    h_query: np.ndarray, h_key: np.ndarray,
                    e_sent_q: np.ndarray, e_act_q: np.ndarray,
                    e_sent_k: np.ndarray, e_act_k: np.ndarray,
                    pos_q: int, pos_k: int) -> tuple[float, list[float]]:
    """Split one attention score on superimposed inputs into its ten parts.

    Returns the score the layer itself computes on (hidden + sentiment-label
    + act-label) inputs, together with the ten bilinear terms of its
    expansion: hidden x hidden, the six hidden/label cross terms, the two
    label x label terms, and the position term.  Their sum equals the direct
    score up to float rounding.
    """
    r = relation_id - 1
    wq = layer.w_query[r].data
    wk = layer.w_key[r].data
    uq = layer.u_query[r].data
    uk = layer.u_key[r].data
    table = layer.position_table.data
    scale = layer.scale

    q_parts = [h_query, e_sent_q, e_act_q]
    k_parts = [h_key, e_sent_k, e_act_k]
    terms = [float(scale * (q @ wq) @ (k @ wk)) for q in q_parts for k in k_parts]
    terms.append(float(scale * (table[pos_q] @ uq) @ (table[pos_k] @ uk)))

    stacked = Tensor(np.stack([h_query + e_sent_q + e_act_q,
                               h_key + e_sent_k + e_act_k]))
    direct = layer.scores(stacked, np.array([pos_q, pos_k]), relation_id)
    return float(direct.data[0, 1]), terms
