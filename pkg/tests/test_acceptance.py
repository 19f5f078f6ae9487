"""End-to-end acceptance checks, one test group per numbered criterion.

The terminal summary lists a PASS/FAIL line per criterion (see conftest.py).
The synthetic comparison (criteria 6-8) trains 7 variants on 3 seeds and
takes several minutes on one core.
"""

import itertools
import math
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from repadapter.adapter import (
    Discriminator, LinearMap, PseudoTargetStore, critic_loss, cycle_loss, generator_loss, mse_adapter_loss,
    reconstruction_loss, squared_error, wgan_d_loss, wgan_g_loss,
)
from repadapter.autodiff import Graph, Parameter, finite_difference_check
from repadapter.cli import main
from repadapter.data import (
    SynthConfig, QASample, balanced_resplit, generate_synthetic_corpus, synthetic_targets,
)
from repadapter.encoders import EmbeddingTable
from repadapter.evaluation import PredictionRecord, macro_accuracy, micro_accuracy, pca_project, seen_rate
from repadapter.experiments import SYNTH_PRESET, TRAIN_PRESET, run_table, summarize
from repadapter.kbqa import Answer, kbqa_accuracy
from repadapter.model import ModelVariant
from repadapter.training import TrainConfig, hinge_ranking_loss, joint_loss, pretrain_baseline, train_with_adapter

ADAPTER_VARIANTS = ["basic-adapter", "basic-adapter-recon", "adversarial-adapter", "adversarial-adapter-recon"]
FINAL = "adversarial-adapter-recon"


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- 1: gradient fidelity -----------------------------------------------------


def _gradcheck(fn, params):
    return finite_difference_check(fn, params, step=1e-5, tolerance=1e-4)


@criterion(1, "gradient fidelity of every loss and every composite variant loss")
def test_c1_individual_losses_gradcheck():
    started = time.perf_counter()
    rng = np.random.default_rng(11)
    d, h = 8, 8
    fwd, rev = LinearMap("g", d, rng), LinearMap("gr", d, rng)
    critic = Discriminator(d, rng, hidden=h)
    e, target = rng.normal(size=(6, d)), rng.normal(size=(6, d))
    q, pos, negs = (Parameter(n, rng.normal(size=s)) for n, s in (("q", d), ("pos", d), ("negs", (4, d))))

    checks = {
        "mse": (lambda g: squared_error(g, g.const(target), fwd(g, e)), fwd.parameters()),
        "critic": (lambda g: critic_loss(g, critic, fwd(g, e), target),
                   fwd.parameters() + [critic.w1, critic.b1, critic.w2]),
        "generator": (lambda g: generator_loss(g, critic, fwd(g, e)), fwd.parameters() + critic.parameters()),
        "reconstruction": (lambda g: cycle_loss(g, fwd, rev, e), fwd.parameters() + rev.parameters()),
        "hinge": (lambda g: hinge_ranking_loss(g.param(q), g.param(pos), g.param(negs), 0.5, g), [q, pos, negs]),
    }
    for name, (fn, params) in checks.items():
        report = _gradcheck(fn, params)
        assert report.passed, (name, report.max_rel_error)
    # the critic's output bias cancels between the two batch means: its gradient is exactly zero
    g = Graph()
    assert g.backward(critic_loss(g, critic, fwd(g, e), target))["disc.b2"].tolist() == [0.0]
    assert hinge_ranking_loss(q.data, pos.data, negs.data, 0.5).value > 0
    print(f"individual losses: {time.perf_counter() - started:.1f}s")


@criterion(1, "gradient fidelity of every loss and every composite variant loss")
def test_c1_composite_variant_losses_gradcheck(toy_batch):
    started = time.perf_counter()
    for variant in ModelVariant:
        tb = toy_batch(variant, dim=4, hidden=3)
        assert len(tb.samples) <= 8
        report = _gradcheck(lambda g: joint_loss(g, tb.model, tb.plan, tb.config, tb.targets)[0],
                            tb.model.detector_parameters())
        assert report.passed, (variant.value, report.max_rel_error)
    elapsed = time.perf_counter() - started
    print(f"composite losses: {elapsed:.1f}s")
    assert elapsed < 60


# -- 2: loss oracles ----------------------------------------------------------


def _cos(a, b):
    return sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def _linear(w, b, x):
    return [sum(w[j][k] * x[k] for k in range(len(x))) + (b[j] if b is not None else 0.0) for j in range(len(w))]


def _critic_score(critic, x):
    w1, b1, w2, b2 = (p.data.tolist() for p in critic.parameters())
    hidden = [math.tanh(sum(x[i] * w1[i][j] for i in range(len(x))) + b1[j]) for j in range(len(b1))]
    return sum(w2[j][0] * hidden[j] for j in range(len(hidden))) + b2[0]


def _random_case(seed):
    rng = np.random.default_rng(seed)
    d, n = int(rng.integers(1, 7)), int(rng.integers(1, 6))
    return rng, d, n


@criterion(2, "loss values match direct formula evaluation to 1e-12")
def test_c2_hinge_oracle():
    for seed in range(100):
        rng, d, n = _random_case(seed)
        d += 1
        q, pos, negs = rng.normal(size=d), rng.normal(size=d), rng.normal(size=(n, d))
        margin = float(rng.uniform(0.01, 1.0))
        expected = sum(max(0.0, margin - _cos(q, pos) + _cos(q, neg)) for neg in negs.tolist())
        assert abs(hinge_ranking_loss(q, pos, negs, margin).value - expected) <= 1e-12


@criterion(2, "loss values match direct formula evaluation to 1e-12")
def test_c2_mse_oracle():
    for seed in range(100):
        rng, d, n = _random_case(seed)
        adapter = LinearMap("g", d, rng, bias=bool(seed % 2))
        adapter.w.data += rng.normal(scale=0.5, size=(d, d))
        names = [f"r{i}" for i in range(n)]
        emb = EmbeddingTable(names, rng.normal(size=(n, d)))
        targets = {r: rng.normal(size=d) for r in names}
        b = adapter.b.data.tolist() if adapter.b is not None else None
        expected = sum(sum((m - t) ** 2 for m, t in zip(_linear(adapter.w.data.tolist(), b, emb[r].tolist()),
                                                          targets[r].tolist()))
                       for r in names) / n
        got = mse_adapter_loss(PseudoTargetStore(targets), adapter, emb, names).value
        assert abs(got - expected) <= 1e-12


@criterion(2, "loss values match direct formula evaluation to 1e-12")
def test_c2_wgan_oracle():
    for seed in range(100):
        rng, d, n = _random_case(seed)
        critic = Discriminator(d, rng, hidden=int(rng.integers(1, 6)))
        for p in critic.parameters():
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
        fake, real = rng.normal(size=(n, d)), rng.normal(size=(int(rng.integers(1, 6)), d))
        fake_mean = sum(_critic_score(critic, x) for x in fake.tolist()) / len(fake)
        real_mean = sum(_critic_score(critic, x) for x in real.tolist()) / len(real)
        assert abs(wgan_d_loss(critic, fake, real).value - (fake_mean - real_mean)) <= 1e-12
        assert abs(wgan_g_loss(critic, fake).value - (-fake_mean)) <= 1e-12


@criterion(2, "loss values match direct formula evaluation to 1e-12")
def test_c2_reconstruction_oracle():
    for seed in range(100):
        rng, d, n = _random_case(seed)
        fwd, rev = LinearMap("g", d, rng), LinearMap("gr", d, rng)
        fwd.w.data += rng.normal(scale=0.5, size=(d, d))
        rev.w.data += rng.normal(scale=0.5, size=(d, d))
        names = [f"r{i}" for i in range(n)]
        emb = EmbeddingTable(names, rng.normal(size=(n, d)))
        expected = 0.0
        for r in names:
            x = emb[r].tolist()
            back = _linear(rev.w.data.tolist(), None, _linear(fwd.w.data.tolist(), None, x))
            expected += sum((a - b) ** 2 for a, b in zip(back, x))
        expected /= n
        assert abs(reconstruction_loss(fwd, rev, emb, names).value - expected) <= 1e-12


# -- 3: clip invariant --------------------------------------------------------


@criterion(3, "critic parameters stay within [-0.1, 0.1] after every update")
def test_c3_clip_invariant_over_adversarial_run():
    corpus = generate_synthetic_corpus(SynthConfig(n_relations=10, n_entities=60, n_samples=240, n_domains=2,
                                                   dim=6), 5)
    split = balanced_resplit(corpus.samples, 5, synthetic_targets(0.6), 0.5, corpus.n_unseen)
    # a large learning rate so the clip actually binds
    config = TrainConfig(lr=0.05, hidden=4, critic_hidden=8, batch_size=8, negatives=3, adapter_batch=4,
                         epochs=20, patience=20)
    _, targets = pretrain_baseline(split, corpus.kg, corpus.words, corpus.relations, config.replace(epochs=1))
    counts, violations, peak = Counter(), [], 0.0

    def watch(kind, model):
        nonlocal peak
        counts[kind] += 1
        for p in model.critic_parameters():
            worst = float(np.abs(p.data).max())
            peak = max(peak, worst)
            if worst > 0.1:
                violations.append((counts[kind], kind, p.name, worst))

    train_with_adapter(split, corpus.kg, corpus.words, corpus.relations, targets, FINAL, config, on_update=watch)
    print(f"generator steps {counts['generator']}, critic steps {counts['critic']}, peak |w| {peak}")
    assert counts["generator"] >= 200
    assert counts["critic"] == 5 * counts["generator"]
    assert violations == []
    assert peak == 0.1


# -- 4: split invariants ------------------------------------------------------


def _sample_key(s):
    return (s.question, s.subject, s.relation, s.obj)


@criterion(4, "balanced resplit invariants, exact partition and determinism")
def test_c4_split_invariants_and_determinism():
    started = time.perf_counter()
    checked = 0
    for pair in range(50):
        rng = np.random.default_rng(1000 + pair)
        cfg = SynthConfig(n_relations=int(rng.integers(5, 31)), n_entities=int(rng.integers(40, 120)),
                          n_samples=int(rng.integers(100, 400)), n_domains=2, dim=4,
                          seen_fraction=float(rng.uniform(0.4, 0.8)))
        corpus = generate_synthetic_corpus(cfg, int(rng.integers(2**31)))
        seed = int(rng.integers(2**31))
        split = balanced_resplit(corpus.samples, seed, synthetic_targets(cfg.seen_fraction), 0.5, corpus.n_unseen)
        assert split.check() == []
        assert split.seen.isdisjoint(split.relations("dev_unseen") | split.relations("test_unseen"))
        assert split.relations("dev_seen") | split.relations("test_seen") <= split.seen
        parts = Counter(_sample_key(s) for _, part in split.items() for s in part)
        assert parts == Counter(_sample_key(s) for s in corpus.samples)
        if pair < 5:
            again = balanced_resplit(corpus.samples, seed, synthetic_targets(cfg.seen_fraction), 0.5,
                                     corpus.n_unseen)
            assert all(again[name] == part for name, part in split.items())
        checked += 1
    elapsed = time.perf_counter() - started
    print(f"{checked} pairs in {elapsed:.1f}s")
    assert checked == 50 and elapsed < 30


# -- 5: metric oracles --------------------------------------------------------

UNIVERSE = ("r0", "r1", "r2")


def _record_sets():
    """Every multiset of (gold, predicted) records with at most 4 samples per gold relation."""
    per_gold = [list(itertools.chain.from_iterable(
        itertools.combinations_with_replacement(UNIVERSE, k) for k in range(5)))] * len(UNIVERSE)
    for choice in itertools.product(*per_gold):
        pairs = [(gold, pred) for gold, preds in zip(UNIVERSE, choice) for pred in preds]
        if pairs:
            yield pairs


def _records(pairs, seen):
    return [PredictionRecord(i, g, p, UNIVERSE, g in seen, p in seen) for i, (g, p) in enumerate(pairs)]


def _brute_micro(pairs):
    return Fraction(sum(1 for g, p in pairs if g == p), len(pairs))


def _brute_macro(pairs):
    golds = sorted({g for g, _ in pairs})
    return sum(Fraction(sum(1 for g, p in pairs if g == r and p == r), sum(1 for g, _ in pairs if g == r))
               for r in golds) / len(golds)


def _brute_seen_rate(pairs, seen):
    golds = sorted({g for g, _ in pairs})
    return sum(Fraction(sum(1 for g, p in pairs if g == r and p in seen), sum(1 for g, _ in pairs if g == r))
               for r in golds) / len(golds)


@criterion(5, "metrics equal brute-force enumeration exactly")
def test_c5_micro_macro_exhaustive():
    n = 0
    for pairs in _record_sets():
        assert len(pairs) <= 20
        recs = _records(pairs, ())
        assert micro_accuracy(recs) == float(_brute_micro(pairs))
        assert macro_accuracy(recs) == float(_brute_macro(pairs))
        n += 1
    assert n == 35 ** 3 - 1


@criterion(5, "metrics equal brute-force enumeration exactly")
def test_c5_seen_rate_exhaustive():
    n = 0
    for size in range(3):
        for seen in itertools.combinations(UNIVERSE, size):
            for pairs in _record_sets():
                if any(g in seen for g, _ in pairs):
                    continue
                assert seen_rate(_records(pairs, seen), seen) == float(_brute_seen_rate(pairs, seen))
                n += 1
    assert n > 0


@criterion(5, "metrics equal brute-force enumeration exactly")
def test_c5_kbqa_accuracy_exhaustive():
    golds = [QASample(("q",), s, r, "m.o") for s in ("s0", "s1") for r in UNIVERSE]
    answers = [None] + [Answer(s, r, "m.x") for s in ("s0", "s1") for r in UNIVERSE]
    cases = list(itertools.product(golds, answers))
    n = 0
    for size in range(1, 5):
        for combo in itertools.combinations_with_replacement(range(len(cases)), size):
            gs = [cases[i][0] for i in combo]
            ps = [cases[i][1] for i in combo]
            hits = 0
            for p, g in zip(ps, gs):
                if p is not None and (p.subject, p.relation) == (g.subject, g.relation):
                    hits += 1
            assert kbqa_accuracy(ps, gs) == float(Fraction(hits, size))
            n += 1
    assert n == sum(math.comb(len(cases) + k - 1, k) for k in range(1, 5))


# -- 6-8: synthetic comparison of all variants --------------------------------

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def table_runs():
    started = time.perf_counter()
    runs = run_table(SEEDS, SYNTH_PRESET, TRAIN_PRESET,
                     progress=lambda r: print(f"seed {r.seed} {r.variant}: {r.seconds:.0f}s", flush=True))
    elapsed = time.perf_counter() - started
    summary = summarize(runs)
    for variant, cols in summary.items():
        print(f"{variant:28s} " + " ".join(f"{k}={100 * m:.1f}±{100 * s:.1f}" for k, (m, s) in sorted(cols.items())))
    return runs, summary, elapsed


def _mean(summary, variant, column):
    return summary[variant][column][0]


@criterion(6, "variant ordering on the synthetic corpus (3 seeds)")
def test_c6_finetune_is_worst_adapter_free_variant(table_runs):
    _, summary, _ = table_runs
    ft = _mean(summary, "baseline-finetune", "test-unseen/micro")
    assert ft < _mean(summary, "baseline-frozen", "test-unseen/micro")
    assert ft < _mean(summary, "frozen-plus-mapping", "test-unseen/micro")


@criterion(6, "variant ordering on the synthetic corpus (3 seeds)")
def test_c6_frozen_beats_finetune_on_unseen(table_runs):
    _, summary, _ = table_runs
    assert _mean(summary, "baseline-frozen", "test-unseen/micro") > _mean(summary, "baseline-finetune",
                                                                          "test-unseen/micro")


@criterion(6, "variant ordering on the synthetic corpus (3 seeds)")
@pytest.mark.parametrize("variant", ADAPTER_VARIANTS)
def test_c6_adapter_gains_ten_points_on_unseen(table_runs, variant):
    _, summary, _ = table_runs
    gain = _mean(summary, variant, "test-unseen/micro") - _mean(summary, "baseline-finetune", "test-unseen/micro")
    print(f"{variant}: unseen micro gain {100 * gain:.1f} points")
    assert gain >= 0.10


@criterion(6, "variant ordering on the synthetic corpus (3 seeds)")
@pytest.mark.parametrize("variant", ADAPTER_VARIANTS)
def test_c6_adapter_keeps_seen_accuracy(table_runs, variant):
    _, summary, _ = table_runs
    gap = abs(_mean(summary, variant, "test-seen/micro") - _mean(summary, "baseline-finetune", "test-seen/micro"))
    assert gap <= 0.05


@criterion(6, "variant ordering on the synthetic corpus (3 seeds)")
def test_c6_runtime(table_runs):
    _, _, elapsed = table_runs
    print(f"3 seeds x 7 variants: {elapsed / 60:.1f} min")
    assert elapsed < 15 * 60


def _per_seed(runs, variant):
    return {r.seed: r for r in runs if r.variant == variant}


@criterion(7, "final variant predicts fewer seen relations for unseen questions")
def test_c7_seen_rate_lower_in_every_seed(table_runs):
    runs, _, _ = table_runs
    ft, final = _per_seed(runs, "baseline-finetune"), _per_seed(runs, FINAL)
    for seed in SEEDS:
        key = ("test-unseen", "seen-rate")
        assert final[seed].metrics[key] < ft[seed].metrics[key], seed


@criterion(8, "end-to-end KBQA: final variant at least as accurate as fine-tuning")
def test_c8_kbqa_direction_and_bound(table_runs):
    runs, _, _ = table_runs
    for run in runs:
        assert run.kbqa <= run.detection, (run.seed, run.variant)
    ft, final = _per_seed(runs, "baseline-finetune"), _per_seed(runs, FINAL)
    for seed in SEEDS:
        assert final[seed].kbqa >= ft[seed].kbqa, seed


# -- 9: PCA oracle --------------------------------------------------------------


@criterion(9, "PCA projections match a dense eigendecomposition")
def test_c9_pca_matches_eigh():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d, n = int(rng.integers(2, 11)), int(rng.integers(3, 51))
        x = rng.normal(size=(n, d)) * rng.uniform(0.1, 3.0, size=d)
        proj, shares = pca_project({i: row for i, row in enumerate(x)})
        got = np.array([proj[i] for i in range(n)])
        xc = x - x.mean(axis=0)
        vals, vecs = np.linalg.eigh(xc.T @ xc / (n - 1))
        order = np.argsort(vals)[::-1][:2]
        ref = xc @ vecs[:, order]
        for j in range(2):
            sign = 1.0 if got[:, j] @ ref[:, j] >= 0 else -1.0
            assert np.max(np.abs(got[:, j] - sign * ref[:, j])) <= 1e-8, (seed, j)
        assert np.allclose(shares, vals[order] / vals.sum(), rtol=0, atol=1e-8)


# -- 10: determinism --------------------------------------------------------------

PIPELINE = ["--n-relations", "12", "--n-entities", "80", "--n-samples", "300", "--n-domains", "2", "--dim", "8",
            "--hidden", "6", "--critic-hidden", "8", "--epochs", "2", "--batch-size", "32", "--negatives", "4",
            "--adapter-batch", "8", "--lr", "0.001", "--tolerance", "0.5", "--seed", "4"]


def _pipeline(root):
    for cmd, out, extra in (("gen-synth", "corpus", []),
                            ("resplit", "split", ["--corpus", "corpus"]),
                            ("train", "train", ["--corpus", "corpus", "--split", "split", "--variant", FINAL]),
                            ("eval", "eval", ["--corpus", "corpus", "--split", "split",
                                              "--checkpoint", "train/checkpoint.npz"])):
        extra = [str(root / x) if x in ("corpus", "split", "train/checkpoint.npz") else x for x in extra]
        assert main([cmd, "--out", str(root / out), *extra, *PIPELINE]) == 0
    return (root / "eval" / "metrics.csv").read_bytes()


@criterion(10, "two pipeline runs with one seed give byte-identical metrics")
def test_c10_pipeline_determinism(tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    assert first == second
    assert first.count(b"\n") == 8
