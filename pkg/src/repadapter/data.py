"""QA samples, knowledge graphs, file formats, the balanced re-split and a synthetic corpus.

File formats (all UTF-8, LF, tab-delimited, no quoting):

* dataset TSV: ``question \\t subject \\t relation \\t object``; the question is
  space-separated tokens.
* knowledge graph TSV: ``subject \\t relation \\t object``.
* alias TSV: ``entity \\t surface form`` (one alias per line, space-separated tokens).
* embeddings: word2vec text format, header ``count dim`` then ``token v1 ... vdim``.
"""

from __future__ import annotations

import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .encoders import EmbeddingTable, tokenize_relation

SPLIT_NAMES = ("train", "dev_seen", "dev_unseen", "test_seen", "test_unseen")
SEEN_SPLITS = ("train", "dev_seen", "test_seen")
UNSEEN_SPLITS = ("dev_unseen", "test_unseen")

# Table-1 shaped defaults (SQB counts divided by their total).
SQB_SIZES = {"train": 75819, "dev_seen": 5383, "dev_unseen": 5758, "test_seen": 10766, "test_unseen": 10717}
SQB_TARGETS = {k: v / sum(SQB_SIZES.values()) for k, v in SQB_SIZES.items()}


class ParseError(ValueError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path, self.line_no = path, line_no


class FormatError(ParseError):
    pass


class ResplitInfeasible(RuntimeError):
    def __init__(self, msg, best_sizes):
        super().__init__(msg)
        self.best_sizes = best_sizes


@dataclass(frozen=True)
class QASample:
    question: tuple[str, ...]
    subject: str
    relation: str
    obj: str

    def __post_init__(self):
        if not self.question:
            raise ContractError("empty question")


@dataclass
class DatasetSplit:
    train: list[QASample] = field(default_factory=list)
    dev_seen: list[QASample] = field(default_factory=list)
    dev_unseen: list[QASample] = field(default_factory=list)
    test_seen: list[QASample] = field(default_factory=list)
    test_unseen: list[QASample] = field(default_factory=list)

    def __getitem__(self, name: str) -> list[QASample]:
        return getattr(self, name)

    def items(self):
        return [(n, self[n]) for n in SPLIT_NAMES]

    def relations(self, name: str) -> set[str]:
        return {s.relation for s in self[name]}

    @property
    def seen(self) -> set[str]:
        return self.relations("train")

    @property
    def unseen(self) -> set[str]:
        return (self.relations("dev_unseen") | self.relations("test_unseen")
                | self.relations("dev_seen") | self.relations("test_seen")) - self.seen

    def sizes(self) -> dict[str, int]:
        return {n: len(self[n]) for n in SPLIT_NAMES}

    def check(self) -> list[str]:
        """Names of violated split invariants (empty list when the split is valid)."""
        bad = []
        train = self.seen
        for n in UNSEEN_SPLITS:
            if self.relations(n) & train:
                bad.append(f"{n} shares relations with train")
        for n in ("dev_seen", "test_seen"):
            if not self.relations(n) <= train:
                bad.append(f"{n} has relations missing from train")
        counts = Counter(id(s) for _, part in self.items() for s in part)
        if any(c > 1 for c in counts.values()):
            bad.append("a sample occurs in more than one split")
        return bad


@dataclass
class RelationVocabulary:
    names: list[str]
    seen: frozenset[str] = frozenset()

    def __post_init__(self):
        self.index = {n: i for i, n in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise ValueError("duplicate relation names")

    def __len__(self):
        return len(self.names)

    @property
    def unseen(self) -> frozenset[str]:
        return frozenset(self.names) - self.seen

    def is_seen(self, name: str) -> bool:
        return name in self.seen


@dataclass
class KnowledgeGraph:
    triples: list[tuple[str, str, str]] = field(default_factory=list)
    aliases: dict[str, list[tuple[str, ...]]] = field(default_factory=dict)

    def relations_of(self) -> dict[str, list[str]]:
        """Subject -> sorted outgoing relation names."""
        out = defaultdict(set)
        for s, r, _ in self.triples:
            out[s].add(r)
        return {s: sorted(rs) for s, rs in out.items()}

    def relation_names(self) -> set[str]:
        return {r for _, r, _ in self.triples}


# -- file I/O ---------------------------------------------------------------


def _lines(path):
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, 1):
            yield i, line.rstrip("\n")


def load_embeddings(path) -> EmbeddingTable:
    names, rows, dim = [], [], None
    for no, line in _lines(path):
        parts = line.split()
        if no == 1:
            if len(parts) != 2:
                raise ParseError(path, no, "header must be 'count dim'")
            try:
                count, dim = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, no, "header must be two integers") from None
            continue
        if not parts:
            continue
        if len(parts) != dim + 1:
            raise FormatError(path, no, f"expected {dim} values, got {len(parts) - 1}")
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError:
            raise ParseError(path, no, "non-numeric value") from None
        names.append(parts[0])
    if dim is None:
        raise ParseError(path, 1, "missing header")
    if len(names) != count:
        raise FormatError(path, len(names) + 1, f"header says {count} rows, found {len(names)}")
    return EmbeddingTable(names, np.array(rows, dtype=np.float64).reshape(len(names), dim))


def save_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{len(table)} {table.dim}\n")
        for name, vec in zip(table.names, table.vectors):
            f.write(name + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_dataset(path) -> list[QASample]:
    out = []
    for no, line in _lines(path):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ParseError(path, no, f"expected 4 tab-separated columns, got {len(cols)}")
        q = tuple(cols[0].lower().split())
        if not q:
            raise ParseError(path, no, "empty question")
        out.append(QASample(q, cols[1], cols[2], cols[3]))
    return out


def save_dataset(samples: Iterable[QASample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(f"{' '.join(s.question)}\t{s.subject}\t{s.relation}\t{s.obj}\n")


def save_split(split: DatasetSplit, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, part in split.items():
        save_dataset(part, Path(directory) / f"{name}.tsv")


def load_split(directory) -> DatasetSplit:
    return DatasetSplit(**{n: load_dataset(Path(directory) / f"{n}.tsv") for n in SPLIT_NAMES})


def save_kg(kg: KnowledgeGraph, kg_path, alias_path) -> None:
    with open(kg_path, "w", encoding="utf-8", newline="\n") as f:
        for t in kg.triples:
            f.write("\t".join(t) + "\n")
    with open(alias_path, "w", encoding="utf-8", newline="\n") as f:
        for ent in sorted(kg.aliases):
            for alias in kg.aliases[ent]:
                f.write(f"{ent}\t{' '.join(alias)}\n")


def load_kg(kg_path, alias_path=None) -> KnowledgeGraph:
    triples = []
    for no, line in _lines(kg_path):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ParseError(kg_path, no, f"expected 3 tab-separated columns, got {len(cols)}")
        triples.append((cols[0], cols[1], cols[2]))
    aliases = defaultdict(list)
    if alias_path is not None:
        for no, line in _lines(alias_path):
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[1].strip():
                raise ParseError(alias_path, no, "expected 'entity<TAB>surface form'")
            aliases[cols[0]].append(tuple(cols[1].lower().split()))
    return KnowledgeGraph(triples, dict(aliases))


# -- balanced re-split ------------------------------------------------------


def _allocate(n: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``n`` items proportionally to ``weights``."""
    total = sum(weights)
    if total <= 0:
        return [0] * len(weights)
    raw = [n * w / total for w in weights]
    out = [int(np.floor(x)) for x in raw]
    for i in sorted(range(len(raw)), key=lambda i: (out[i] - raw[i], i))[: n - sum(out)]:
        out[i] += 1
    return out


def _fill_group(samples: list[QASample], names: Sequence[str], weights, anchor_first: bool):
    counts = _allocate(len(samples), [weights[n] for n in names])
    if anchor_first:
        # one sample per relation goes to the first split (train) so seen splits stay covered
        seen_rel, anchors, rest = set(), [], []
        for s in samples:
            (rest if s.relation in seen_rel else anchors).append(s)
            seen_rel.add(s.relation)
        samples = anchors + rest
        if counts[0] < len(anchors):
            counts = [len(anchors)] + _allocate(len(rest), [weights[n] for n in names[1:]])
    out, start = {}, 0
    for name, c in zip(names, counts):
        out[name] = samples[start:start + c]
        start += c
    return out


def balanced_resplit(samples: Sequence[QASample], seed: int, targets: dict[str, float] | None = None,
                     tolerance: float = 0.1, n_unseen_relations: int | None = None,
                     max_retries: int = 1000) -> DatasetSplit:
    """Re-split ``samples`` into the five seen/unseen sets.

    Relations are shuffled into an unseen group and a seen group; unseen-group
    samples only reach Dev-unseen/Test-unseen. The relation assignment is
    redrawn until every split size is within ``tolerance`` (relative) of
    ``targets[split] * len(samples)``. If ``n_unseen_relations`` is None the
    unseen group grows until its sample share is closest to the unseen targets.
    """
    targets = dict(SQB_TARGETS if targets is None else targets)
    if set(targets) != set(SPLIT_NAMES):
        raise ContractError(f"targets must name exactly {SPLIT_NAMES}")
    tot = sum(targets.values())
    targets = {k: v / tot for k, v in targets.items()}
    samples = list(samples)
    by_rel = defaultdict(list)
    for s in samples:
        by_rel[s.relation].append(s)
    relations = sorted(by_rel)
    if len(relations) < 2:
        raise ContractError("balanced_resplit needs at least two distinct relations")
    if n_unseen_relations is not None and not 0 < n_unseen_relations < len(relations):
        raise ContractError(f"n_unseen_relations must be in (0, {len(relations)})")
    n = len(samples)
    unseen_share = sum(targets[k] for k in UNSEEN_SPLITS) * n
    rng = np.random.default_rng(seed)
    best, best_dev = None, np.inf
    for _ in range(max_retries):
        order = [relations[i] for i in rng.permutation(len(relations))]
        if n_unseen_relations is not None:
            unseen = set(order[:n_unseen_relations])
        else:
            unseen, count = set(), 0
            for r in order:
                c = len(by_rel[r])
                if abs(count + c - unseen_share) < abs(count - unseen_share) and len(unseen) < len(order) - 1:
                    unseen.add(r)
                    count += c
            if not unseen:
                unseen.add(order[0])
        seen_samples = [s for r in order if r not in unseen for s in by_rel[r]]
        unseen_samples = [s for r in order if r in unseen for s in by_rel[r]]
        seen_samples = [seen_samples[i] for i in rng.permutation(len(seen_samples))]
        unseen_samples = [unseen_samples[i] for i in rng.permutation(len(unseen_samples))]
        parts = _fill_group(seen_samples, SEEN_SPLITS, targets, anchor_first=True)
        parts.update(_fill_group(unseen_samples, UNSEEN_SPLITS, targets, anchor_first=False))
        split = DatasetSplit(**parts)
        dev = max(abs(len(split[k]) - targets[k] * n) / (targets[k] * n)
                  for k in SPLIT_NAMES if targets[k] > 0)
        if dev < best_dev:
            best, best_dev = split, dev
        if dev <= tolerance:
            return split
    raise ResplitInfeasible(
        f"no relation assignment within tolerance {tolerance} after {max_retries} tries "
        f"(best relative deviation {best_dev:.3f}, sizes {best.sizes()})", best.sizes())


def resplit_report(split: DatasetSplit) -> list[dict]:
    """Table-1 style rows: split, samples, seen and unseen relation counts."""
    seen = split.seen
    rows = []
    for name, part in split.items():
        rels = {s.relation for s in part}
        rows.append({"split": name, "samples": len(part),
                     "seen_relations": len(rels & seen), "unseen_relations": len(rels - seen)})
    return rows


# -- synthetic corpus --------------------------------------------------------


_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"]
_VOWELS = ["a", "e", "i", "o", "u"]
_FILLERS = ["what", "is", "the", "of", "who", "which", "does", "do", "tell", "me", "name", "a",
            "for", "was", "an", "please", "about", "to", "in", "know"]
_TEMPLATES = [
    "what is the {cue} of {ent}",
    "which {cue} does {ent} have",
    "who is the {cue} of {ent}",
    "tell me the {cue} for {ent}",
    "name a {cue} of {ent}",
    "what was the {cue} of the {ent}",
    "{ent} {cue} is what",
    "do you know the {cue} of {ent}",
]


@dataclass
class SynthConfig:
    n_relations: int = 50
    seen_fraction: float = 0.6
    n_entities: int = 400
    n_samples: int = 2000
    n_domains: int = 5
    types_per_domain: int = 2
    dim: int = 32
    cues_per_property: int = 3
    literal_cue_prob: float = 0.1
    relation_noise: float = 0.3
    word_noise: float = 0.3
    cue_noise: float = 0.5
    cue_rotation: float = 0.0
    relation_rotation: float = 0.0
    scale: float = 1.0
    relations_per_entity: float = 0.6
    name_pool: int = 250

    def validate(self):
        if min(self.n_relations, self.n_entities, self.n_samples, self.dim) <= 0:
            raise ContractError("synthetic corpus counts must be positive")
        if not 0 < self.seen_fraction < 1:
            raise ContractError("seen_fraction must lie in (0, 1)")
        if self.n_relations < 2:
            raise ContractError("need at least two relations")

    @property
    def n_unseen(self) -> int:
        return max(1, min(self.n_relations - 1, round((1 - self.seen_fraction) * self.n_relations)))


@dataclass
class SyntheticCorpus:
    kg: KnowledgeGraph
    samples: list[QASample]
    words: EmbeddingTable
    relations: EmbeddingTable
    n_unseen: int


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], syllables=(2, 3)) -> list[str]:
    out = []
    while len(out) < n:
        k = rng.integers(syllables[0], syllables[1] + 1)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def generate_synthetic_corpus(config: SynthConfig, seed: int) -> SyntheticCorpus:
    """Desk-scale stand-in for a QA corpus, its knowledge graph and pretrained embeddings.

    Relation names are ``domain.type.property``. Every name word has a latent
    concept vector; a relation's pretrained vector is the sum of its three
    word concepts plus noise, and a question mentions its relation through a
    paraphrase ("cue") word whose vector is a noisy copy of the property
    concept. Entity names are left out of the word table.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.dim
    taken = set(_FILLERS)
    n_types = config.n_domains * config.types_per_domain
    per_type = int(np.ceil(config.n_relations / n_types))
    domains = _pseudo_words(rng, config.n_domains, taken)
    types = _pseudo_words(rng, n_types, taken)
    props = _pseudo_words(rng, config.n_relations, taken)
    classes = [(domains[i // config.types_per_domain], types[i]) for i in range(n_types)]

    rel_names, rel_class = [], []
    for k in range(config.n_relations):
        c = k // per_type if k // per_type < n_types else k % n_types
        rel_names.append(f"{classes[c][0]}.{classes[c][1]}.{props[k]}")
        rel_class.append(c)

    concept = {w: rng.normal(0, 1 / np.sqrt(d), d) for w in domains + types + props}
    word_vecs: dict[str, np.ndarray] = {}
    for w, v in concept.items():
        word_vecs[w] = v + rng.normal(0, config.word_noise / np.sqrt(d), d)
    # questions live in a linearly transformed copy of the concept space
    rot, _ = np.linalg.qr(rng.normal(size=(d, d)))
    cue_map = config.cue_rotation * rot + (1.0 - config.cue_rotation) * np.eye(d)
    # relation vectors come from a different (KG) space than the words
    rot2, _ = np.linalg.qr(rng.normal(size=(d, d)))
    rel_map = config.relation_rotation * rot2 + (1.0 - config.relation_rotation) * np.eye(d)
    cues = {}
    for p in props:
        cues[p] = _pseudo_words(rng, config.cues_per_property, taken)
        for c in cues[p]:
            word_vecs[c] = cue_map @ concept[p] + rng.normal(0, config.cue_noise / np.sqrt(d), d)
    for w in _FILLERS:
        word_vecs[w] = rng.normal(0, 1 / np.sqrt(d), d)
    rel_vecs = np.stack([
        rel_map @ sum(concept[t] for t in tokenize_relation(name)) + rng.normal(0, config.relation_noise / np.sqrt(d), d)
        for name in rel_names])

    # entities: a class each, a subset of that class's relations, and a (possibly shared) name
    surnames = _pseudo_words(rng, config.name_pool, taken, syllables=(2, 3))
    class_rels = defaultdict(list)
    for k, c in enumerate(rel_class):
        class_rels[c].append(k)
    ent_ids = [f"m.{i:05d}" for i in range(config.n_entities)]
    triples, aliases, ent_rels = [], {}, {}
    for i, e in enumerate(ent_ids):
        c = i % n_types
        rels = [k for k in class_rels[c] if rng.random() < config.relations_per_entity]
        if len(rels) < 2:
            rels = sorted(rng.choice(class_rels[c], size=min(2, len(class_rels[c])), replace=False).tolist())
        ent_rels[e] = rels
        n_tok = 1 + int(rng.random() < 0.5)
        aliases[e] = [tuple(surnames[j] for j in rng.integers(len(surnames), size=n_tok))]
        for k in rels:
            obj = ent_ids[rng.integers(len(ent_ids))]
            triples.append((e, rel_names[k], obj))
    by_rel = defaultdict(list)
    for s, r, o in triples:
        by_rel[r].append((s, o))

    samples = []
    for j in range(config.n_samples):
        k = j % config.n_relations if j < config.n_relations else int(rng.integers(config.n_relations))
        name = rel_names[k]
        if not by_rel[name]:
            continue
        s, o = by_rel[name][rng.integers(len(by_rel[name]))]
        p = props[k]
        cue = p if rng.random() < config.literal_cue_prob else cues[p][rng.integers(len(cues[p]))]
        tpl = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        q = tpl.format(cue=cue, ent=" ".join(aliases[s][0]))
        samples.append(QASample(tuple(q.split()), s, name, o))

    names = list(word_vecs)
    words = EmbeddingTable(names, config.scale * np.stack([word_vecs[w] for w in names]))
    relations = EmbeddingTable(rel_names, config.scale * rel_vecs)
    return SyntheticCorpus(KnowledgeGraph(triples, aliases), samples, words, relations, config.n_unseen)


def synthetic_targets(seen_fraction: float) -> dict[str, float]:
    """Split targets for a corpus whose relations are (roughly) equally frequent."""
    u = 1.0 - seen_fraction
    return {"train": seen_fraction * 0.75, "dev_seen": seen_fraction * 0.083,
            "test_seen": seen_fraction * 0.167, "dev_unseen": u * 0.33, "test_unseen": u * 0.67}
