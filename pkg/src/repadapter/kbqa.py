"""Single-fact question answering on top of the relation detector.

Entity linking is exact (case-insensitive) alias matching. The candidate
relations are the outgoing relations of all linked subjects, and the answer
is the (subject, relation) pair with the highest relation score.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .data import KnowledgeGraph, QASample

UNANSWERABLE = "UNANSWERABLE"


@dataclass(frozen=True)
class Answer:
    subject: str
    relation: str
    obj: str


class TripleIndex:
    """Immutable lookup tables over a knowledge graph."""

    def __init__(self, kg: KnowledgeGraph):
        facts = defaultdict(set)
        for s, r, o in kg.triples:
            facts[s].add((r, o))
        self.facts = {s: frozenset(v) for s, v in facts.items()}
        surface = defaultdict(set)
        for e, forms in kg.aliases.items():
            for form in forms:
                toks = tuple(t.lower() for t in form)
                if toks:
                    surface[toks].add(e)
        self.surface = {k: frozenset(v) for k, v in surface.items()}
        self.max_alias_len = max((len(k) for k in self.surface), default=0)

    def relations(self, subject: str) -> list[str]:
        return sorted({r for r, _ in self.facts.get(subject, ())})

    def objects(self, subject: str, relation: str) -> list[str]:
        return sorted(o for r, o in self.facts.get(subject, ()) if r == relation)


def matched_spans(question: Sequence[str], index: TripleIndex) -> list[tuple[int, int]]:
    """Alias-matching spans ``[start, stop)`` that no longer overlapping match beats."""
    toks = [t.lower() for t in question]
    found = []
    for i in range(len(toks)):
        for j in range(i + 1, min(len(toks), i + index.max_alias_len) + 1):
            if tuple(toks[i:j]) in index.surface:
                found.append((i, j))
    found.sort(key=lambda s: (-(s[1] - s[0]), s[0]))
    kept = []
    for a, b in found:
        if not any(c < b and a < d and d - c > b - a for c, d in kept):
            kept.append((a, b))
    return sorted(kept)


def link_entities(question: Sequence[str], index: TripleIndex) -> dict[str, int]:
    """Candidate subjects with the length of their longest matched span."""
    toks = [t.lower() for t in question]
    out: dict[str, int] = {}
    for a, b in matched_spans(question, index):
        for e in index.surface[tuple(toks[a:b])]:
            out[e] = max(out.get(e, 0), b - a)
    return dict(sorted(out.items()))


def _pick(scores: np.ndarray, candidates: dict[str, int], index: TripleIndex,
          relation_index: dict[str, int]) -> Answer | None:
    best, best_key = None, None
    for e, overlap in candidates.items():
        for r in index.relations(e):
            if r not in relation_index:
                continue
            rid = relation_index[r]
            # highest score, then longer alias match, then smaller entity id, then smaller relation id
            key = (-scores[rid], -overlap, e, rid)
            if best_key is None or key < best_key:
                best, best_key = (e, r), key
    if best is None:
        return None
    e, r = best
    return Answer(e, r, index.objects(e, r)[0])


def answer(question: Sequence[str], model, index: TripleIndex) -> Answer | None:
    """Best (subject, relation, object) for one question; ``None`` when unanswerable."""
    cands = link_entities(question, index)
    if not cands:
        return None
    scores = model.score_matrix([list(question)])[0]
    return _pick(scores, cands, index, model.relation_index)


def answer_all(questions: Sequence[Sequence[str]], model, index: TripleIndex) -> list[Answer | None]:
    """Batched :func:`answer`; scores every question in one pass."""
    if not questions:
        return []
    scores = model.score_matrix([list(q) for q in questions])
    out = []
    for q, row in zip(questions, scores):
        cands = link_entities(q, index)
        out.append(_pick(row, cands, index, model.relation_index) if cands else None)
    return out


def kbqa_accuracy(predictions: Sequence[Answer | None], golds: Sequence[QASample]) -> float:
    """Share of questions whose subject and relation are both right."""
    if len(predictions) != len(golds):
        raise ContractError(f"{len(predictions)} predictions for {len(golds)} questions")
    if not golds:
        raise ContractError("kbqa accuracy of an empty set")
    hits = sum(p is not None and p.subject == g.subject and p.relation == g.relation
               for p, g in zip(predictions, golds))
    return hits / len(golds)


def write_answers(path, predictions: Sequence[Answer | None]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        for qid, p in enumerate(predictions):
            w.writerow([qid, UNANSWERABLE] if p is None else [qid, p.subject, p.relation, p.obj])
