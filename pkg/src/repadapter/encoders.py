"""Vocabulary, embedding tables and the BiLSTM question/relation encoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError, DimensionError, Graph, Node, Parameter

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"


class Vocabulary:
    """Token <-> id map with ``<pad>`` fixed at 0 and ``<unk>`` at 1."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]


@dataclass
class EmbeddingTable:
    """Named rows of a ``(n, dim)`` matrix, as read from a word2vec-style file."""

    names: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.names):
            raise DimensionError(f"{len(self.names)} names for a {self.vectors.shape} matrix")
        self.index = {n: i for i, n in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise ValueError("duplicate names in embedding table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[self.index[name]]

    def __contains__(self, name):
        return name in self.index


def word_matrix(table: EmbeddingTable) -> tuple[Vocabulary, np.ndarray]:
    """Vocabulary over ``table`` plus its matrix with pad (zeros) and unk rows.

    The unk row is the mean of all known vectors.
    """
    vocab = Vocabulary(table.names)
    mat = np.zeros((len(vocab), table.dim))
    if len(table):
        mat[UNK] = table.vectors.mean(axis=0)
        mat[2:] = table.vectors
    return vocab, mat


def tokenize_relation(name: str) -> list[str]:
    """``"people.person.place_of_birth"`` -> ``[people, person, place, of, birth]``."""
    if not name:
        raise ContractError("empty relation name")
    return [t for t in name.lower().replace("_", ".").split(".") if t]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


# -- BiLSTM -----------------------------------------------------------------


class LstmParams:
    """One LSTM direction. Gate layout along the last axis: input, forget, output, cell."""

    def __init__(self, prefix: str, input_dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.input_dim = input_dim
        self.wx = Parameter(f"{prefix}.wx", glorot(rng, input_dim, 4 * hidden))
        self.wh = Parameter(f"{prefix}.wh", glorot(rng, hidden, 4 * hidden))
        self.b = Parameter(f"{prefix}.b", np.zeros(4 * hidden))

    def parameters(self):
        return [self.wx, self.wh, self.b]


class BiLstmParams:
    def __init__(self, prefix: str, input_dim: int, hidden: int, rng: np.random.Generator):
        self.fwd = LstmParams(f"{prefix}.fwd", input_dim, hidden, rng)
        self.bwd = LstmParams(f"{prefix}.bwd", input_dim, hidden, rng)

    @property
    def input_dim(self):
        return self.fwd.input_dim

    @property
    def output_dim(self):
        return 2 * self.fwd.hidden

    def parameters(self):
        return self.fwd.parameters() + self.bwd.parameters()


def _run_lstm(g: Graph, p: LstmParams, x: Node, mask: np.ndarray, reverse: bool) -> list[Node]:
    batch, steps, _ = x.shape
    h = p.hidden
    proj = g.matmul(x, g.param(p.wx)) + g.param(p.b)
    wh = g.param(p.wh)
    h_prev = c_prev = None
    outs: list[Node | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = g.select(proj, t, axis=1)
        if h_prev is not None:
            z = z + g.matmul(h_prev, wh)
        gates = g.sigmoid(g.slice(z, 0, 3 * h))
        i_g = g.slice(gates, 0, h)
        f_g = g.slice(gates, h, 2 * h)
        o_g = g.slice(gates, 2 * h, 3 * h)
        cand = g.tanh(g.slice(z, 3 * h, 4 * h))
        c_new = i_g * cand if c_prev is None else f_g * c_prev + i_g * cand
        h_new = o_g * g.tanh(c_new)
        m = mask[:, t:t + 1]
        if m.all():
            h_prev, c_prev = h_new, c_new
        else:
            # padded steps carry the previous state (zeros before the first real step)
            h_prev = h_new * m if h_prev is None else h_new * m + h_prev * (1.0 - m)
            c_prev = c_new * m if c_prev is None else c_new * m + c_prev * (1.0 - m)
        outs[t] = h_prev
    return outs


def bilstm(g: Graph, params: BiLstmParams, x: Node, mask=None) -> Node:
    """Batched BiLSTM: ``x`` is ``(batch, steps, in)``; returns ``(batch, steps, 2h)``."""
    x = g._lift(x)
    if x.value.ndim != 3:
        raise DimensionError(f"bilstm: expected (batch, steps, features), got {x.shape}")
    batch, steps, dim = x.shape
    if steps == 0:
        raise ContractError("bilstm over an empty sequence")
    if dim != params.input_dim:
        raise DimensionError(f"bilstm: input dim {dim}, expected {params.input_dim}")
    mask = np.ones((batch, steps)) if mask is None else np.asarray(mask, dtype=np.float64)
    fwd = _run_lstm(g, params.fwd, x, mask, reverse=False)
    bwd = _run_lstm(g, params.bwd, x, mask, reverse=True)
    return g.concat([g.stack(fwd, axis=1), g.stack(bwd, axis=1)], axis=-1)


def bilstm_encode(params: BiLstmParams, inputs: Sequence[Sequence[float]]) -> np.ndarray:
    """Unbatched convenience wrapper: ``(steps, in)`` -> ``(steps, 2h)``."""
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError("bilstm_encode needs a non-empty sequence of vectors")
    g = Graph(record=False)
    return bilstm(g, params, g.const(arr[None])).value[0]


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    if any(len(s) == 0 for s in seqs):
        raise ContractError("empty token sequence")
    steps = max(len(s) for s in seqs)
    ids = np.full((len(seqs), steps), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), steps))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


# -- detector encoders -------------------------------------------------------


class Encoders:
    """Question and relation networks sharing the word-level BiLSTM."""

    def __init__(self, word_dim: int, rel_dim: int, hidden: int, rng: np.random.Generator):
        self.word_dim = word_dim
        self.rel_dim = rel_dim
        self.hidden = hidden
        self.shared = BiLstmParams("enc.shared", word_dim, hidden, rng)
        self.question2 = BiLstmParams("enc.question2", 2 * hidden, hidden, rng)
        self.rel_proj = (Parameter("enc.rel_proj", glorot(rng, rel_dim, word_dim))
                         if rel_dim != word_dim else None)

    @property
    def output_dim(self):
        return 2 * self.hidden

    def parameters(self):
        ps = self.shared.parameters() + self.question2.parameters()
        return ps + ([self.rel_proj] if self.rel_proj is not None else [])

    def questions(self, g: Graph, words: Node, ids: np.ndarray, mask: np.ndarray) -> Node:
        """``(batch, 2h)`` question vectors: two BiLSTM layers, summed, max-pooled."""
        x = g.take(words, ids)
        low = bilstm(g, self.shared, x, mask)
        high = bilstm(g, self.question2, low, mask)
        return g.max_over_time(low + high, axis=1, mask=mask[:, :, None] > 0)

    def relations(self, g: Graph, words: Node, name_ids: Sequence[Sequence[int]], rel_vectors: Node) -> Node:
        """``(n, 2h)`` relation vectors.

        Each relation's sequence is its name-word embeddings followed by one
        extra step holding its relation-level vector.
        """
        rel_vectors = g._lift(rel_vectors)
        n = len(name_ids)
        if rel_vectors.shape != (n, self.rel_dim):
            raise DimensionError(f"relation vectors {rel_vectors.shape}, expected ({n}, {self.rel_dim})")
        lengths = [len(s) for s in name_ids]
        if min(lengths, default=1) == 0:
            raise ContractError("relation with no name tokens")
        ids, word_mask = pad_ids([list(s) + [PAD] for s in name_ids])
        slot = np.zeros(ids.shape)
        slot[np.arange(n), lengths] = 1.0
        word_mask = word_mask - slot
        if self.rel_proj is not None:
            rel_vectors = g.matmul(rel_vectors, g.param(self.rel_proj))
        x = g.take(words, ids) * word_mask[:, :, None]
        x = x + g.reshape(rel_vectors, (n, 1, self.word_dim)) * slot[:, :, None]
        mask = word_mask + slot
        out = bilstm(g, self.shared, x, mask)
        return g.max_over_time(out, axis=1, mask=mask[:, :, None] > 0)


def encode_question(enc: Encoders, words: np.ndarray, token_ids: Sequence[int]) -> np.ndarray:
    if len(token_ids) == 0:
        raise ContractError("empty question")
    g = Graph(record=False)
    ids, mask = pad_ids([token_ids])
    return enc.questions(g, g.const(words), ids, mask).value[0]


def encode_relation(enc: Encoders, words: np.ndarray, word_ids: Sequence[int], rel_vector) -> np.ndarray:
    rel_vector = np.asarray(rel_vector, dtype=np.float64)
    if rel_vector.shape != (enc.rel_dim,):
        raise DimensionError(f"relation-level vector {rel_vector.shape}, expected ({enc.rel_dim},)")
    g = Graph(record=False)
    return enc.relations(g, g.const(words), [word_ids], g.const(rel_vector[None])).value[0]


def score(q, r) -> float:
    """Cosine similarity between a question and a relation encoding."""
    q, r = np.asarray(q, float), np.asarray(r, float)
    nq, nr = np.linalg.norm(q), np.linalg.norm(r)
    if nq == 0 or nr == 0:
        raise ContractError("score of a zero vector")
    return float(q @ r / (nq * nr))
