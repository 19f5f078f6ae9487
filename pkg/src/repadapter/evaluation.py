"""Relation prediction, accuracy metrics, seen rate, PCA and repeated-resplit evaluation."""

from __future__ import annotations

import csv
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .data import KnowledgeGraph, QASample


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: int
    gold: str
    predicted: str
    candidates: tuple[str, ...]
    gold_seen: bool
    predicted_seen: bool

    @property
    def correct(self) -> bool:
        return self.gold == self.predicted


@dataclass
class MetricReport:
    micro: float
    macro: float
    per_relation: dict[str, float] = field(default_factory=dict)
    count: int = 0


def _argmax_candidate(scores: np.ndarray, candidates: Sequence[int]) -> int:
    """Best candidate index; exact ties go to the smallest id."""
    cands = sorted(candidates)
    vals = scores[cands]
    return cands[int(np.argmax(vals))]


def predict_relation(model, question: Sequence[str], candidates: Sequence[str]) -> str:
    if not candidates:
        raise ContractError("no candidate relations")
    scores = model.score_matrix([list(question)])[0]
    idx = [model.relation_index[c] for c in candidates]
    return model.relation_names[_argmax_candidate(scores, idx)]


def candidate_sets(model, samples: Sequence[QASample], kg: KnowledgeGraph | None) -> list[list[str]]:
    """Gold-subject candidates (entity linking assumed correct); all relations without a KG."""
    if kg is None:
        return [list(model.relation_names)] * len(samples)
    rels = kg.relations_of()
    out = []
    for s in samples:
        c = set(rels.get(s.subject, ()))
        c.add(s.relation)
        out.append(sorted(r for r in c if r in model.relation_index))
    return out


def predict_samples(model, samples: Sequence[QASample], kg: KnowledgeGraph | None,
                    seen: Iterable[str]) -> list[PredictionRecord]:
    seen = set(seen)
    if not samples:
        return []
    scores = model.score_matrix([s.question for s in samples])
    records = []
    for i, (s, cands) in enumerate(zip(samples, candidate_sets(model, samples, kg))):
        idx = [model.relation_index[c] for c in cands]
        pred = model.relation_names[_argmax_candidate(scores[i], idx)]
        records.append(PredictionRecord(i, s.relation, pred, tuple(cands), s.relation in seen, pred in seen))
    return records


# -- metrics ----------------------------------------------------------------


def micro_accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise ContractError("micro accuracy of an empty record set")
    return sum(r.correct for r in records) / len(records)


def per_relation_accuracy(records: Sequence[PredictionRecord]) -> dict[str, float]:
    hits, total = defaultdict(int), defaultdict(int)
    for r in records:
        total[r.gold] += 1
        hits[r.gold] += r.correct
    return {g: hits[g] / total[g] for g in sorted(total)}


def _mean_of_ratios(hits: dict, total: dict) -> float:
    # exact rational arithmetic, so the result does not depend on summation order
    return float(sum(Fraction(hits[k], total[k]) for k in total) / len(total))


def macro_accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise ContractError("macro accuracy of an empty record set")
    hits, total = defaultdict(int), defaultdict(int)
    for r in records:
        total[r.gold] += 1
        hits[r.gold] += r.correct
    return _mean_of_ratios(hits, total)


def metric_report(records: Sequence[PredictionRecord]) -> MetricReport:
    return MetricReport(micro_accuracy(records), macro_accuracy(records),
                        per_relation_accuracy(records), len(records))


def seen_rate(records: Sequence[PredictionRecord], seen: Iterable[str]) -> float:
    """Macro average over unseen gold relations of the share predicted as a seen relation."""
    seen = set(seen)
    if not records:
        raise ContractError("seen rate of an empty record set")
    hits, total = defaultdict(int), defaultdict(int)
    for r in records:
        if r.gold in seen:
            raise ContractError(f"seen rate expects unseen gold relations, got {r.gold}")
        total[r.gold] += 1
        hits[r.gold] += r.predicted in seen
    return _mean_of_ratios(hits, total)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = list(values)
    if not values:
        raise ContractError("no values")
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def format_pm(mean: float, std: float) -> str:
    """Percent with one decimal, e.g. ``77.3±7.6``."""
    return f"{100 * mean:.1f}±{100 * std:.1f}"


# -- experiment-level evaluation -------------------------------------------


def evaluate_split(model, split, kg) -> dict[tuple[str, str], float]:
    """Table-2/5 metric set for a trained model: ``(split, metric) -> value``."""
    seen = split.seen
    seen_recs = predict_samples(model, split.test_seen, kg, seen)
    unseen_recs = predict_samples(model, split.test_unseen, kg, seen)
    out = {}
    for name, recs in (("test-seen", seen_recs), ("test-unseen", unseen_recs), ("all", seen_recs + unseen_recs)):
        if recs:
            out[(name, "micro")] = micro_accuracy(recs)
            out[(name, "macro")] = macro_accuracy(recs)
    if unseen_recs:
        out[("test-unseen", "seen-rate")] = seen_rate(unseen_recs, seen)
    return out


METRIC_ROWS = [("test-seen", "micro"), ("test-seen", "macro"), ("test-unseen", "micro"),
               ("test-unseen", "macro"), ("test-unseen", "seen-rate"), ("all", "micro"), ("all", "macro")]


def write_metric_csv(path, runs: Sequence[dict], formatted: bool = False) -> list[dict]:
    """Write ``split,metric,mean,std`` rows aggregated over ``runs``."""
    rows = []
    for key in METRIC_ROWS:
        vals = [r[key] for r in runs if key in r]
        if not vals:
            continue
        m, s = mean_std(vals)
        row = {"split": key[0], "metric": key[1], "mean": f"{m:.6f}", "std": f"{s:.6f}"}
        if formatted:
            row["formatted"] = format_pm(m, s)
        rows.append(row)
    with open(path, "w", encoding="utf-8", newline="") as f:
        fields = ["split", "metric", "mean", "std"] + (["formatted"] if formatted else [])
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def cross_validate(corpus, k: int = 10, variant="adversarial-adapter-recon", config=None, seed: int = 0,
                   targets=None, tolerance: float = 0.2, n_unseen_relations=None) -> tuple[list[dict], dict]:
    """``k`` independent seeded resplit + train + evaluate runs.

    ``corpus`` is a :class:`~repadapter.data.SyntheticCorpus`-like object
    with ``samples``, ``kg``, ``words`` and ``relations``. Returns the
    per-run metric dicts and a ``key -> (mean, std)`` summary.
    """
    from .data import balanced_resplit
    from .training import TrainConfig, run_variant

    if k < 2:
        raise ContractError("cross validation needs k >= 2")
    if len({s.relation for s in corpus.samples}) < 2 * k and len(corpus.samples) < 5 * k:
        raise ContractError(f"corpus too small for {k} folds")
    config = config or TrainConfig()
    runs = []
    for fold in range(k):
        fold_seed = seed * 1000 + fold
        split = balanced_resplit(corpus.samples, fold_seed, targets, tolerance, n_unseen_relations)
        cfg = config.replace(seed=fold_seed)
        model = run_variant(split, corpus.kg, corpus.words, corpus.relations, variant, cfg).model
        runs.append(evaluate_split(model, split, corpus.kg))
    summary = {key: mean_std([r[key] for r in runs if key in r]) for key in METRIC_ROWS
               if any(key in r for r in runs)}
    return runs, summary


def relation_count_ablation(split, kg, words, relations, counts: Sequence[int], budget: int | None,
                            config=None, variants=("baseline-finetune", "adversarial-adapter-recon")) -> list[dict]:
    """Retrain with only ``count`` training relations; Test-unseen macro accuracy per model.

    Training samples are subsampled to at most ``budget`` after the relation
    restriction. Dev/test splits are left as they are.
    """
    from .data import DatasetSplit
    from .training import TrainConfig, run_variant

    config = config or TrainConfig()
    seen = sorted(split.seen)
    rows = []
    for count in counts:
        if not 1 <= count <= len(seen):
            raise ContractError(f"relation count {count} not in [1, {len(seen)}]")
        rng = np.random.default_rng(config.seed + count)
        keep = set(seen) if count == len(seen) else {seen[i] for i in rng.choice(len(seen), count, replace=False)}
        train = [s for s in split.train if s.relation in keep]
        if budget is not None and len(train) > budget:
            train = [train[i] for i in sorted(rng.choice(len(train), budget, replace=False))]
        sub = DatasetSplit(train, [s for s in split.dev_seen if s.relation in keep], split.dev_unseen,
                           [s for s in split.test_seen if s.relation in keep], split.test_unseen)
        for v in variants:
            model = run_variant(sub, kg, words, relations, v, config).model
            recs = predict_samples(model, split.test_unseen, kg, sub.seen)
            rows.append({"model": str(getattr(v, "value", v)), "count": count,
                         "macro_unseen": macro_accuracy(recs)})
    return rows


# -- PCA --------------------------------------------------------------------


class DegenerateDataError(ValueError):
    pass


def _sign_fix(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return -v if nz.size and v[nz[0]] < 0 else v


def _power_iteration(cov: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int):
    v = rng.normal(size=cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v
        w /= norm
        if w @ v < 0:
            w = -w
        lam = float(w @ cov @ w)
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return lam, v


def pca_project(vectors: dict, components: int = 2, tol: float = 1e-13, max_iter: int = 100_000,
                seed: int = 0) -> tuple[dict, np.ndarray]:
    """Project onto the top principal axes found by power iteration with deflation.

    Returns ``{id: coords}`` and the explained-variance share of each component.
    Axis signs are fixed so that the first nonzero coordinate is positive.
    """
    keys = list(vectors)
    if len(keys) < 3:
        raise ContractError("PCA needs at least three vectors")
    x = np.asarray([vectors[k] for k in keys], dtype=np.float64)
    x = x - x.mean(axis=0)
    cov = x.T @ x / (len(keys) - 1)
    total = float(np.trace(cov))
    if total <= 1e-300:
        raise DegenerateDataError("all vectors are identical (rank-0 data)")
    rng = np.random.default_rng(seed)
    axes, shares = [], []
    work = cov.copy()
    for _ in range(components):
        lam, v = _power_iteration(work, rng, tol, max_iter)
        if lam <= 1e-12 * total:
            # nothing left: any unit vector orthogonal to the previous axes
            lam = 0.0
            for e in np.eye(len(v)):
                u = e - sum((e @ a) * a for a in axes)
                if np.linalg.norm(u) > 1e-6:
                    v = u / np.linalg.norm(u)
                    break
        v = _sign_fix(v)
        axes.append(v)
        shares.append(max(lam, 0.0) / total)
        work = work - lam * np.outer(v, v)
    proj = x @ np.array(axes).T
    return {k: proj[i] for i, k in enumerate(keys)}, np.array(shares)
