"""Multi-seed comparison of all detector variants on the synthetic corpus.

``SYNTH_PRESET`` and ``TRAIN_PRESET`` are the desk-scale settings used by the
acceptance suite and ``scripts/run_table2.py``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .data import SynthConfig, balanced_resplit, generate_synthetic_corpus, synthetic_targets
from .evaluation import evaluate_split, mean_std, micro_accuracy, predict_samples
from .kbqa import TripleIndex, answer_all, kbqa_accuracy
from .model import ModelVariant
from .training import TrainConfig, pretrain_baseline, train_with_adapter

# relation vectors live in a rotated copy of the word space and relation names
# are noisy, so the vector slot only helps a model that learns the mapping back
SYNTH_PRESET = SynthConfig(dim=16, relation_noise=0.1, word_noise=1.0, cue_noise=1.0, literal_cue_prob=0.0,
                           relation_rotation=1.0, scale=0.1)
TRAIN_PRESET = TrainConfig(lr=1e-3, hidden=32, critic_hidden=64, batch_size=64, negatives=16, epochs=40,
                           patience=10)
SPLIT_TOLERANCE = 0.25

VARIANTS = [v.value for v in ModelVariant]


@dataclass
class VariantRun:
    seed: int
    variant: str
    metrics: dict
    kbqa: float
    detection: float
    epochs: int
    seconds: float
    extra: dict = field(default_factory=dict)


def _kbqa_scores(model, split, kg, index):
    golds = split.test_seen + split.test_unseen
    preds = answer_all([s.question for s in golds], model, index)
    detect = micro_accuracy(predict_samples(model, golds, kg, split.seen))
    return kbqa_accuracy(preds, golds), detect


def run_seed(seed: int, synth: SynthConfig = SYNTH_PRESET, train: TrainConfig = TRAIN_PRESET,
             variants=VARIANTS, progress=None) -> list[VariantRun]:
    """Generate, split and train every variant once; adapter variants share one pretrained baseline."""
    corpus = generate_synthetic_corpus(synth, seed)
    split = balanced_resplit(corpus.samples, seed, synthetic_targets(synth.seen_fraction), SPLIT_TOLERANCE,
                             corpus.n_unseen)
    index = TripleIndex(corpus.kg)
    config = train.replace(seed=seed)
    runs = []

    def record(variant, trained, started):
        kbqa, detect = _kbqa_scores(trained.model, split, corpus.kg, index)
        run = VariantRun(seed, variant, evaluate_split(trained.model, split, corpus.kg), kbqa, detect,
                         len(trained.log), time.perf_counter() - started)
        runs.append(run)
        if progress is not None:
            progress(run)

    started = time.perf_counter()
    baseline, _ = pretrain_baseline(split, corpus.kg, corpus.words, corpus.relations, config)
    if "baseline-finetune" in variants:
        record("baseline-finetune", baseline, started)
    for variant in variants:
        if variant == "baseline-finetune":
            continue
        started = time.perf_counter()
        trained = train_with_adapter(split, corpus.kg, corpus.words, corpus.relations, baseline, variant, config)
        record(variant, trained, started)
    return runs


def run_table(seeds, synth: SynthConfig = SYNTH_PRESET, train: TrainConfig = TRAIN_PRESET, variants=VARIANTS,
              progress=None) -> list[VariantRun]:
    return [run for seed in seeds for run in run_seed(seed, synth, train, variants, progress)]


def summarize(runs: list[VariantRun]) -> dict[str, dict[str, tuple[float, float]]]:
    """``variant -> column -> (mean, std)`` over seeds, for the metric grid plus KBQA."""
    by_variant: dict[str, list[VariantRun]] = {}
    for run in runs:
        by_variant.setdefault(run.variant, []).append(run)
    out = {}
    for variant, group in by_variant.items():
        cols = {f"{s}/{m}": mean_std([r.metrics[(s, m)] for r in group]) for (s, m) in group[0].metrics}
        cols["kbqa"] = mean_std([r.kbqa for r in group])
        cols["detection"] = mean_std([r.detection for r in group])
        out[variant] = cols
    return out
