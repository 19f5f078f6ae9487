"""The relation detector: encoders, relation-level vectors and the optional adapters."""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from .adapter import AdapterBundle, Discriminator, LinearMap, dropout_mask
from .autodiff import ContractError, Graph, Node, Parameter
from .encoders import EmbeddingTable, Encoders, pad_ids, tokenize_relation, word_matrix


class ModelVariant(str, Enum):
    BASELINE_FINETUNE = "baseline-finetune"
    BASELINE_FROZEN = "baseline-frozen"
    FROZEN_MAPPING = "frozen-plus-mapping"
    BASIC = "basic-adapter"
    BASIC_RECON = "basic-adapter-recon"
    ADVERSARIAL = "adversarial-adapter"
    ADVERSARIAL_RECON = "adversarial-adapter-recon"

    @classmethod
    def parse(cls, name) -> "ModelVariant":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            raise ContractError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}") from None

    @property
    def finetunes_embeddings(self) -> bool:
        return self is ModelVariant.BASELINE_FINETUNE

    @property
    def has_mapping(self) -> bool:
        return self not in (ModelVariant.BASELINE_FINETUNE, ModelVariant.BASELINE_FROZEN)

    @property
    def adapter_loss(self) -> str | None:
        if self in (ModelVariant.BASIC, ModelVariant.BASIC_RECON):
            return "mse"
        if self in (ModelVariant.ADVERSARIAL, ModelVariant.ADVERSARIAL_RECON):
            return "wgan"
        return None

    @property
    def reconstruction(self) -> bool:
        return self in (ModelVariant.BASIC_RECON, ModelVariant.ADVERSARIAL_RECON)

    @property
    def needs_targets(self) -> bool:
        return self.adapter_loss is not None


FINAL = ModelVariant.ADVERSARIAL_RECON
BASELINE = ModelVariant.BASELINE_FINETUNE


class RelationDetector:
    """Scores questions against relations by cosine of their encodings.

    The pretrained tables are copied on construction; ``word_eg`` and
    ``relation_eg`` are never written to. The fine-tuning variant trains
    separate ``emb.words``/``emb.relations`` parameters initialised from them.
    """

    def __init__(self, words: EmbeddingTable, relations: EmbeddingTable, variant, hidden: int,
                 rng: np.random.Generator, critic_hidden: int = 256, adapter_bias: bool = False):
        self.variant = ModelVariant.parse(variant)
        self.vocab, wm = word_matrix(words)
        self.word_eg = wm
        self.word_eg.flags.writeable = False
        self.relation_names = list(relations.names)
        self.relation_index = {n: i for i, n in enumerate(self.relation_names)}
        self.relation_eg = relations.vectors.copy()
        self.relation_eg.flags.writeable = False
        self.name_ids = [self.vocab.encode(tokenize_relation(n)) for n in self.relation_names]
        dim = relations.dim
        self.encoders = Encoders(words.dim, dim, hidden, rng)
        self.adapters = AdapterBundle()
        if self.variant.has_mapping:
            self.adapters.forward = LinearMap("adapter.fwd", dim, rng, bias=adapter_bias)
        if self.variant.reconstruction:
            self.adapters.reverse = LinearMap("adapter.rev", dim, rng, bias=adapter_bias)
        if self.variant.adapter_loss == "wgan":
            self.adapters.critic = Discriminator(dim, rng, hidden=critic_hidden)
        if self.variant.finetunes_embeddings:
            self.word_emb = Parameter("emb.words", wm)
            self.rel_emb = Parameter("emb.relations", self.relation_eg)
        else:
            self.word_emb = self.rel_emb = None

    # -- parameter bookkeeping ----------------------------------------------

    def detector_parameters(self) -> list[Parameter]:
        """Everything updated by the joint (non-critic) step."""
        ps = self.encoders.parameters() + self.adapters.generator_parameters()
        if self.word_emb is not None:
            ps += [self.word_emb, self.rel_emb]
        return ps

    def critic_parameters(self) -> list[Parameter]:
        return self.adapters.critic.parameters() if self.adapters.critic else []

    def parameters(self) -> list[Parameter]:
        return self.detector_parameters() + self.critic_parameters()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape}, expected {p.shape}")
            p.data[...] = state[p.name]

    # -- graph pieces ---------------------------------------------------------

    def words(self, g: Graph) -> Node:
        return g.param(self.word_emb) if self.word_emb is not None else g.const(self.word_eg)

    def relation_level(self, g: Graph, idx: Sequence[int], rng: np.random.Generator | None = None,
                       dropout: float = 0.0) -> Node:
        """Relation-level input vectors for relations ``idx``.

        With ``rng`` set (training) the adapter output gets a dropout mask.
        """
        idx = np.asarray(idx, dtype=np.int64)
        if self.rel_emb is not None:
            return g.take(g.param(self.rel_emb), idx)
        base = g.const(self.relation_eg[idx])
        if self.adapters.forward is None:
            return base
        mask = dropout_mask(rng, (len(idx), self.relation_eg.shape[1]), dropout) if rng is not None else None
        return self.adapters.forward(g, base, mask)

    def encode_relations(self, g: Graph, idx: Sequence[int], rng=None, dropout: float = 0.0) -> Node:
        vecs = self.relation_level(g, idx, rng, dropout)
        return self.encoders.relations(g, self.words(g), [self.name_ids[i] for i in idx], vecs)

    def question_ids(self, questions: Sequence[Sequence[str]]):
        return pad_ids([self.vocab.encode(q) for q in questions])

    def encode_questions(self, g: Graph, questions: Sequence[Sequence[str]]) -> Node:
        ids, mask = self.question_ids(questions)
        return self.encoders.questions(g, self.words(g), ids, mask)

    # -- inference -------------------------------------------------------------

    def relation_vectors(self) -> np.ndarray:
        """Evaluation-time relation-level vectors for every relation (no dropout)."""
        g = Graph(record=False)
        return self.relation_level(g, np.arange(len(self.relation_names))).value.copy()

    def relation_encodings(self) -> np.ndarray:
        g = Graph(record=False)
        return self.encode_relations(g, np.arange(len(self.relation_names))).value.copy()

    def question_encodings(self, questions: Sequence[Sequence[str]], chunk: int = 512) -> np.ndarray:
        out = []
        for i in range(0, len(questions), chunk):
            g = Graph(record=False)
            out.append(self.encode_questions(g, questions[i:i + chunk]).value)
        return np.concatenate(out) if out else np.zeros((0, self.encoders.output_dim))

    def score_matrix(self, questions: Sequence[Sequence[str]]) -> np.ndarray:
        """Cosine scores ``(n_questions, n_relations)``."""
        q = self.question_encodings(questions)
        r = self.relation_encodings()
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        rn = r / np.linalg.norm(r, axis=1, keepdims=True)
        return qn @ rn.T
