"""Baseline pretraining, joint adapter training and the checkpoint format.

Checkpoint layout (a zip archive readable with ``numpy.load``):

* ``meta.json`` -- UTF-8 JSON: ``format`` (= ``repadapter-checkpoint/1``),
  ``variant``, ``config`` (all TrainConfig fields), ``words`` (vocabulary
  tokens in id order, including ``<pad>``/``<unk>``), ``relations`` (names
  in id order), ``seen`` (sorted seen relation names), ``targets`` (sorted
  names of the pseudo-target rows), ``log`` (per-epoch records).
* ``<parameter name>.npy`` -- one float64 array per parameter.
* ``eg.words.npy`` / ``eg.relations.npy`` -- the frozen pretrained tables.
* ``targets.npy`` -- pseudo-target matrix, rows ordered as ``meta.targets``.

Entries are written in a fixed order with a fixed timestamp, so equal models
give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import PseudoTargetStore, critic_loss, cycle_loss, generator_loss, squared_error
from .autodiff import ContractError, Graph, Node, RmsPropState, clip_parameters, rmsprop_step
from .data import DatasetSplit, KnowledgeGraph, QASample
from .encoders import EmbeddingTable
from .evaluation import micro_accuracy, predict_samples
from .model import ModelVariant, RelationDetector

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "repadapter-checkpoint/1"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    negatives: int = 256
    margin: float = 0.1
    clip: float = 0.1
    dropout: float = 0.2
    adapter_weight: float = 1.0
    recon_weight: float = 1.0
    n_critic: int = 5
    epochs: int = 30
    patience: int = 5
    seed: int = 0
    hidden: int = 256
    critic_hidden: int = 256
    adapter_batch: int = 256
    adapter_bias: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ContractError("margin must be positive")
        if self.negatives < 1:
            raise ContractError("need at least one negative sample")
        if self.clip <= 0:
            raise ContractError("clip bound must be positive")
        if min(self.lr, self.batch_size, self.epochs, self.hidden, self.n_critic, self.adapter_batch) <= 0:
            raise ContractError("rates, sizes and counts must be positive")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainedModel:
    model: RelationDetector
    config: TrainConfig
    seen: list[str]
    targets: PseudoTargetStore | None = None
    log: list[dict] = field(default_factory=list)

    @property
    def variant(self) -> ModelVariant:
        return self.model.variant


# -- losses ------------------------------------------------------------------


def sample_negatives(gold: str, pool: Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    """``k`` relations from ``pool`` (gold excluded); without replacement when possible."""
    pool = [r for r in pool if r != gold]
    if not pool:
        raise ContractError("empty negative pool")
    if len(pool) >= k:
        idx = rng.choice(len(pool), size=k, replace=False)
    else:
        idx = rng.integers(len(pool), size=k)
    return [pool[i] for i in idx]


def hinge_ranking_loss(q, positive, negatives, margin: float, g: Graph | None = None) -> Node:
    """``sum_neg max(0, margin - s(q, r+) + s(q, r-))`` with cosine ``s``."""
    if margin <= 0:
        raise ContractError("margin must be positive")
    g = g or Graph()
    negatives = g._lift(negatives)
    if negatives.shape[0] == 0:
        raise ContractError("hinge loss needs at least one negative")
    q, positive = g._lift(q), g._lift(positive)
    sims = g.cosine_matrix(g.reshape(q, (1, q.shape[-1])), g.concat([g.reshape(positive, (1, -1)), negatives], axis=0))
    sims = g.reshape(sims, (sims.shape[1],))
    pos = g.slice(sims, 0, 1)
    neg = g.slice(sims, 1, sims.shape[0])
    return g.sum(g.relu(margin - pos + neg))


def batch_hinge(g: Graph, scores: Node, pos_col: np.ndarray, neg_cols: np.ndarray, margin: float) -> Node:
    """Batch mean of the per-question hinge sums, from a ``(batch, relations)`` score node."""
    pos = g.take_along(scores, pos_col[:, None], axis=1)
    neg = g.take_along(scores, neg_cols, axis=1)
    return g.mean(g.sum(g.relu(margin - pos + neg), axis=1))


@dataclass
class BatchPlan:
    """Everything random about one training step, drawn up front so the loss is replayable."""

    samples: list[QASample]
    pool: list[int]
    pos_cols: np.ndarray
    neg_cols: np.ndarray
    dropout_rng_seed: int
    adapter_rows: np.ndarray | None = None
    recon_rows: np.ndarray | None = None


def make_plan(model: RelationDetector, samples: Sequence[QASample], pool: Sequence[int], config: TrainConfig,
              rng: np.random.Generator, targets_rows: Sequence[int] = ()) -> BatchPlan:
    names = [model.relation_names[i] for i in pool]
    col = {r: j for j, r in enumerate(names)}
    pos = np.array([col[s.relation] for s in samples], dtype=np.int64)
    neg = np.array([[col[r] for r in sample_negatives(s.relation, names, config.negatives, rng)]
                    for s in samples], dtype=np.int64)
    plan = BatchPlan(list(samples), list(pool), pos, neg, int(rng.integers(2**31)))
    if model.variant.needs_targets:
        n = min(config.adapter_batch, len(targets_rows))
        plan.adapter_rows = np.sort(rng.choice(np.asarray(targets_rows), size=n, replace=False))
    if model.variant.reconstruction:
        total = len(model.relation_names)
        plan.recon_rows = np.sort(rng.choice(total, size=min(config.adapter_batch, total), replace=False))
    return plan


def detection_loss(g: Graph, model: RelationDetector, plan: BatchPlan, config: TrainConfig, train: bool = True) -> Node:
    rng = np.random.default_rng(plan.dropout_rng_seed) if train else None
    rels = model.encode_relations(g, plan.pool, rng, config.dropout)
    qs = model.encode_questions(g, [s.question for s in plan.samples])
    return batch_hinge(g, g.cosine_matrix(qs, rels), plan.pos_cols, plan.neg_cols, config.margin)


def joint_loss(g: Graph, model: RelationDetector, plan: BatchPlan, config: TrainConfig,
               targets: np.ndarray | None, train: bool = True) -> tuple[Node, dict[str, float]]:
    """``L_rd + adapter_weight * adapter term + recon_weight * reconstruction``.

    ``targets`` is the full pseudo-target matrix indexed by relation id (rows
    of relations without a target are ignored).
    """
    loss = detection_loss(g, model, plan, config, train)
    parts = {"rd": float(loss.value)}
    variant, ad = model.variant, model.adapters
    if variant.adapter_loss is not None:
        mapped = ad.forward(g, g.const(model.relation_eg[plan.adapter_rows]))
        if variant.adapter_loss == "mse":
            term = squared_error(g, g.const(targets[plan.adapter_rows]), mapped)
        else:
            term = generator_loss(g, ad.critic, mapped)
        parts["adapter"] = float(term.value)
        loss = loss + g.scale(term, config.adapter_weight)
    if variant.reconstruction:
        term = cycle_loss(g, ad.forward, ad.reverse, g.const(model.relation_eg[plan.recon_rows]))
        parts["recon"] = float(term.value)
        loss = loss + g.scale(term, config.recon_weight)
    return loss, parts


def critic_step(model: RelationDetector, targets: np.ndarray, rows: np.ndarray, state: RmsPropState,
                config: TrainConfig) -> float:
    """One discriminator update on seen relations ``rows``, followed by clipping."""
    ad = model.adapters
    g0 = Graph(record=False)
    fake = ad.forward(g0, g0.const(model.relation_eg[rows])).value
    g = Graph()
    loss = critic_loss(g, ad.critic, g.const(fake), g.const(targets[rows]))
    grads = g.backward(loss)
    params = model.critic_parameters()
    rmsprop_step(params, grads, state, config.lr)
    clip_parameters(params, config.clip)
    return float(loss.value)


def wgan_alternation_step(model: RelationDetector, plan: BatchPlan, targets: np.ndarray, config: TrainConfig,
                          critic_state: RmsPropState, state: RmsPropState,
                          rng: np.random.Generator, on_update=None) -> dict[str, float]:
    """``n_critic`` clipped critic updates, then one joint generator/detector update."""
    seen_rows = np.flatnonzero(np.isfinite(targets[:, 0]))
    d_losses = []
    for _ in range(config.n_critic):
        rows = np.sort(rng.choice(seen_rows, size=min(config.adapter_batch, len(seen_rows)), replace=False))
        d_losses.append(critic_step(model, targets, rows, critic_state, config))
        if on_update is not None:
            on_update("critic", model)
    parts = generator_step(model, plan, targets, config, state)
    if on_update is not None:
        on_update("generator", model)
    parts["critic"] = float(np.mean(d_losses))
    parts["critic_steps"] = len(d_losses)
    return parts


def generator_step(model, plan, targets, config, state) -> dict[str, float]:
    g = Graph()
    loss, parts = joint_loss(g, model, plan, config, targets)
    grads = g.backward(loss)
    rmsprop_step(model.detector_parameters(), grads, state, config.lr)
    parts["loss"] = float(loss.value)
    return parts


# -- training loops ----------------------------------------------------------


def _target_matrix(model: RelationDetector, targets: PseudoTargetStore | None) -> np.ndarray | None:
    if targets is None:
        return None
    mat = np.full(model.relation_eg.shape, np.nan)
    for name, vec in targets.vectors.items():
        if name in model.relation_index:
            mat[model.relation_index[name]] = vec
    return mat


def _accuracy(model, samples, kg, seen):
    return micro_accuracy(predict_samples(model, samples, kg, seen)) if samples else float("nan")


def train_model(split: DatasetSplit, kg: KnowledgeGraph | None, words: EmbeddingTable, relations: EmbeddingTable,
                variant, config: TrainConfig, targets: PseudoTargetStore | None = None,
                on_update=None, init_state: dict | None = None) -> TrainedModel:
    """Train one variant with early stopping on Dev-seen micro accuracy.

    ``on_update(kind, model)`` is called after every parameter update
    (``kind`` is ``"critic"`` or ``"generator"``). ``init_state`` holds
    encoder weights to start from; embedding tables are never copied.
    """
    variant = ModelVariant.parse(variant)
    if not split.train:
        raise ContractError("empty training data")
    if variant.needs_targets and (targets is None or len(targets) == 0):
        raise ContractError(f"variant {variant.value} needs pseudo target representations")
    rng = np.random.default_rng(config.seed)
    model = RelationDetector(words, relations, variant, config.hidden, rng,
                             critic_hidden=config.critic_hidden, adapter_bias=config.adapter_bias)
    if init_state is not None:
        for p in model.parameters():
            if p.name in init_state and not p.name.startswith("emb."):
                if init_state[p.name].shape != p.shape:
                    raise ContractError(f"{p.name}: initial state has shape {init_state[p.name].shape}")
                p.data[...] = init_state[p.name]
    seen = sorted(split.seen)
    missing = [r for r in seen if r not in model.relation_index]
    if missing:
        raise ContractError(f"relations without pretrained vectors: {missing[:3]}")
    pool = [model.relation_index[r] for r in seen]
    tmat = _target_matrix(model, targets)
    target_rows = [] if tmat is None else [i for i in pool if np.isfinite(tmat[i, 0])]
    if variant.needs_targets and not target_rows:
        raise ContractError("no pseudo targets for the training relations")
    state, critic_state = RmsPropState(), RmsPropState()
    best, best_key, bad_epochs, history = model.state(), None, 0, []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(split.train))
        totals = []
        for start in range(0, len(order), config.batch_size):
            batch = [split.train[i] for i in order[start:start + config.batch_size]]
            plan = make_plan(model, batch, pool, config, rng, target_rows)
            if variant.adapter_loss == "wgan":
                parts = wgan_alternation_step(model, plan, tmat, config, critic_state, state, rng, on_update)
            else:
                parts = generator_step(model, plan, tmat, config, state)
                if on_update is not None:
                    on_update("generator", model)
            totals.append(parts)
        dev_seen = _accuracy(model, split.dev_seen, kg, seen)
        dev_unseen = _accuracy(model, split.dev_unseen, kg, seen)
        row = {"epoch": epoch, "loss": float(np.mean([p["loss"] for p in totals])),
               "dev_seen_acc": dev_seen, "dev_unseen_acc": dev_unseen}
        for key in ("rd", "adapter", "recon", "critic"):
            if key in totals[0]:
                row[key] = float(np.mean([p[key] for p in totals]))
        row["critic_steps"] = int(sum(p.get("critic_steps", 0) for p in totals))
        row["generator_steps"] = len(totals)
        history.append(row)
        log.info("%s epoch %d loss %.4f dev-seen %.3f dev-unseen %.3f", variant.value, epoch,
                 row["loss"], dev_seen, dev_unseen)
        # ties on dev accuracy go to the lower training loss
        key = (dev_seen if np.isfinite(dev_seen) else -np.inf, -row["loss"])
        if best_key is None or key > best_key:
            best, best_key, bad_epochs = model.state(), key, 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    model.load_state(best)
    return TrainedModel(model, config, seen, targets, history)


def snapshot_targets(trained: TrainedModel) -> PseudoTargetStore:
    """Fine-tuned relation-level input vectors of the seen relations."""
    m = trained.model
    if m.rel_emb is None:
        raise ContractError("pseudo targets come from a model that fine-tunes relation embeddings")
    return PseudoTargetStore({r: m.rel_emb.data[m.relation_index[r]].copy() for r in trained.seen})


def pretrain_baseline(split, kg, words, relations, config: TrainConfig, on_update=None):
    """Train the fine-tuning baseline and snapshot its seen relation vectors as pseudo targets."""
    trained = train_model(split, kg, words, relations, ModelVariant.BASELINE_FINETUNE, config, on_update=on_update)
    targets = snapshot_targets(trained)
    trained.targets = targets
    return trained, targets


def train_with_adapter(split, kg, words, relations, pretrained, variant, config: TrainConfig,
                       on_update=None) -> TrainedModel:
    """Train an adapter variant on top of a pretrained baseline.

    ``pretrained`` is either the fine-tuned baseline (its encoders are the
    starting point and its relation vectors the pseudo targets) or a bare
    :class:`PseudoTargetStore`, in which case the encoders start fresh.
    """
    variant = ModelVariant.parse(variant)
    init_state = None
    if isinstance(pretrained, TrainedModel):
        if pretrained.model.variant is not ModelVariant.BASELINE_FINETUNE:
            raise ContractError(f"cannot start from a {pretrained.model.variant.value} model")
        targets = pretrained.targets if pretrained.targets is not None else snapshot_targets(pretrained)
        if variant.needs_targets:
            init_state = pretrained.model.state()
    else:
        targets = pretrained
    if variant.needs_targets and targets is None:
        raise ContractError(f"variant {variant.value} needs pseudo targets from a pretrained baseline")
    return train_model(split, kg, words, relations, variant, config, targets, on_update, init_state)


def run_variant(split, kg, words, relations, variant, config: TrainConfig,
                targets: PseudoTargetStore | None = None) -> TrainedModel:
    """Train ``variant``, pretraining the baseline first when pseudo targets are needed."""
    variant = ModelVariant.parse(variant)
    if variant is ModelVariant.BASELINE_FINETUNE:
        return pretrain_baseline(split, kg, words, relations, config)[0]
    if variant.needs_targets and targets is None:
        targets = pretrain_baseline(split, kg, words, relations, config)[0]
    return train_with_adapter(split, kg, words, relations, targets, variant, config)


# -- checkpoints -------------------------------------------------------------


_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(trained: TrainedModel, path) -> None:
    m = trained.model
    target_names = sorted(trained.targets.vectors) if trained.targets is not None else []
    meta = {
        "format": CHECKPOINT_FORMAT,
        "variant": m.variant.value,
        "config": dataclasses.asdict(trained.config),
        "words": m.vocab.itos,
        "relations": m.relation_names,
        "seen": sorted(trained.seen),
        "targets": target_names,
        "log": trained.log,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode("utf-8"))
        for p in m.parameters():
            _write_entry(zf, f"{p.name}.npy", _npy_bytes(p.data))
        _write_entry(zf, "eg.words.npy", _npy_bytes(m.word_eg))
        _write_entry(zf, "eg.relations.npy", _npy_bytes(m.relation_eg))
        if target_names:
            _write_entry(zf, "targets.npy", _npy_bytes(trained.targets.matrix(target_names)))


def load_checkpoint(path) -> TrainedModel:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        arrays = {n[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(n)))
                  for n in zf.namelist() if n.endswith(".npy")}
    config = TrainConfig(**meta["config"])
    vocab_tokens = meta["words"][2:]
    words = EmbeddingTable(vocab_tokens, arrays["eg.words"][2:])
    relations = EmbeddingTable(meta["relations"], arrays["eg.relations"])
    model = RelationDetector(words, relations, meta["variant"], config.hidden, np.random.default_rng(0),
                             critic_hidden=config.critic_hidden, adapter_bias=config.adapter_bias)
    # the unk row is derived, restore it bit-exactly anyway
    model.word_eg.flags.writeable = True
    model.word_eg[...] = arrays["eg.words"]
    model.word_eg.flags.writeable = False
    model.load_state(arrays)
    targets = None
    if meta["targets"]:
        targets = PseudoTargetStore({n: arrays["targets"][i].copy() for i, n in enumerate(meta["targets"])})
    return TrainedModel(model, config, meta["seen"], targets, meta["log"])
