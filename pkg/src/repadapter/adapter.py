"""Linear adapter G, reverse adapter G', Wasserstein critic D and their losses.

All losses are batch means. Graph-level helpers take and return nodes so they
compose with the detector loss; the module-level functions are thin wrappers
that work on relation ids and plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError, DimensionError, Graph, Node, Parameter
from .encoders import EmbeddingTable, glorot


class LinearMap:
    """``x -> W x (+ b)`` applied to row vectors, initialised near identity."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator, bias: bool = False,
                 noise: float = 0.01):
        self.dim = dim
        self.w = Parameter(f"{name}.w", np.eye(dim) + rng.uniform(-noise, noise, size=(dim, dim)))
        self.b = Parameter(f"{name}.b", np.zeros(dim)) if bias else None

    def parameters(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def __call__(self, g: Graph, x, mask=None) -> Node:
        x = g._lift(x)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"adapter: input dim {x.shape[-1]}, expected {self.dim}")
        out = g.matmul(x, g.transpose(g.param(self.w)))
        if self.b is not None:
            out = out + g.param(self.b)
        if mask is not None:
            out = g.dropout(out, mask)
        return out


class Discriminator:
    """Critic ``d -> hidden (tanh) -> 1`` with a linear output."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 256, name: str = "disc"):
        self.w1 = Parameter(f"{name}.w1", glorot(rng, dim, hidden))
        self.b1 = Parameter(f"{name}.b1", np.zeros(hidden))
        self.w2 = Parameter(f"{name}.w2", glorot(rng, hidden, 1))
        self.b2 = Parameter(f"{name}.b2", np.zeros(1))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, g: Graph, x) -> Node:
        """Scores for each row of ``x`` as a 1-d node."""
        x = g._lift(x)
        if x.shape[-1] != self.w1.shape[0]:
            raise DimensionError(f"discriminator: input dim {x.shape[-1]}, expected {self.w1.shape[0]}")
        hid = g.tanh(g.matmul(x, g.param(self.w1)) + g.param(self.b1))
        out = g.matmul(hid, g.param(self.w2)) + g.param(self.b2)
        return g.reshape(out, out.shape[:-1])


@dataclass
class AdapterBundle:
    forward: LinearMap | None = None
    reverse: LinearMap | None = None
    critic: Discriminator | None = None

    def generator_parameters(self) -> list[Parameter]:
        ps = []
        for m in (self.forward, self.reverse):
            if m is not None:
                ps += m.parameters()
        return ps

    def parameters(self) -> list[Parameter]:
        return self.generator_parameters() + (self.critic.parameters() if self.critic else [])


@dataclass
class PseudoTargetStore:
    """Fine-tuned task-space vectors for seen relations, keyed by relation name."""

    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __contains__(self, name):
        return name in self.vectors

    def __len__(self):
        return len(self.vectors)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.vectors[n] for n in names])

    def as_table(self) -> EmbeddingTable:
        names = sorted(self.vectors)
        return EmbeddingTable(names, np.stack([self.vectors[n] for n in names]) if names else np.zeros((0, 0)))

    @classmethod
    def from_table(cls, table: EmbeddingTable) -> "PseudoTargetStore":
        return cls({n: table.vectors[i].copy() for i, n in enumerate(table.names)})


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept entries scaled by ``1/(1-rate)``."""
    if rate <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


# -- graph-level losses -----------------------------------------------------


def squared_error(g: Graph, a, b) -> Node:
    """Mean over rows of ``||a - b||^2``."""
    diff = g.sub(a, b)
    return g.mean(g.sum(diff * diff, axis=-1))


def critic_loss(g: Graph, critic: Discriminator, fake, real) -> Node:
    fake, real = g._lift(fake), g._lift(real)
    if fake.shape[0] == 0 or real.shape[0] == 0:
        raise ContractError("critic loss needs non-empty fake and real batches")
    return g.mean(critic(g, fake)) - g.mean(critic(g, real))


def generator_loss(g: Graph, critic: Discriminator, fake) -> Node:
    fake = g._lift(fake)
    if fake.shape[0] == 0:
        raise ContractError("generator loss needs a non-empty batch")
    return -g.mean(critic(g, fake))


def cycle_loss(g: Graph, fwd: LinearMap, rev: LinearMap, x) -> Node:
    x = g._lift(x)
    return squared_error(g, rev(g, fwd(g, x)), x)


# -- id-level wrappers ------------------------------------------------------


def _rows(embeddings: EmbeddingTable, batch: Iterable[str]) -> np.ndarray:
    batch = list(batch)
    if not batch:
        raise ContractError("empty relation batch")
    return np.stack([embeddings[r] for r in batch])


def apply_adapter(adapter: LinearMap, e_g, mask=None) -> np.ndarray:
    g = Graph(record=False)
    return adapter(g, g.const(np.asarray(e_g, float)), mask).value


def mse_adapter_loss(targets: PseudoTargetStore, adapter: LinearMap, embeddings: EmbeddingTable,
                     batch: Sequence[str], g: Graph | None = None) -> Node:
    unseen = [r for r in batch if r not in targets]
    if unseen:
        raise ContractError(f"adapter MSE loss is defined on seen relations only; got {unseen[:3]}")
    g = g or Graph()
    return squared_error(g, g.const(targets.matrix(batch)), adapter(g, _rows(embeddings, batch)))


def discriminator_score(critic: Discriminator, v) -> np.ndarray | float:
    v = np.asarray(v, float)
    g = Graph(record=False)
    out = critic(g, g.const(v[None] if v.ndim == 1 else v)).value
    return float(out[0]) if v.ndim == 1 else out


def _batch(x) -> np.ndarray:
    x = np.asarray(x, float)
    if x.size == 0:
        raise ContractError("empty batch")
    return np.atleast_2d(x)


def wgan_d_loss(critic: Discriminator, fake, real, g: Graph | None = None) -> Node:
    g = g or Graph()
    fake, real = _batch(fake), _batch(real)
    return critic_loss(g, critic, fake, real)


def wgan_g_loss(critic: Discriminator, fake, g: Graph | None = None) -> Node:
    g = g or Graph()
    return generator_loss(g, critic, _batch(fake))


def reconstruction_loss(fwd: LinearMap, rev: LinearMap, embeddings: EmbeddingTable,
                        batch: Sequence[str], g: Graph | None = None) -> Node:
    g = g or Graph()
    return cycle_loss(g, fwd, rev, _rows(embeddings, batch))
