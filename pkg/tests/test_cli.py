import csv
import zipfile

import pytest

from repadapter.cli import main, read_config_file, resolve_config
from repadapter.autodiff import ContractError

TINY = {
    "n_relations": "10", "n_entities": "60", "n_samples": "200", "n_domains": "2", "dim": "8",
    "hidden": "4", "critic_hidden": "8", "epochs": "2", "batch_size": "32", "negatives": "4",
    "adapter_batch": "8", "lr": "0.001", "tolerance": "0.5",
}


def flags(values):
    out = []
    for k, v in values.items():
        out += [f"--{k.replace('_', '-')}", v]
    return out


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out.strip(), captured.err.strip()


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base = flags(TINY)
    assert main(["gen-synth", "--seed", "3", "--out", str(root / "corpus"), *base]) == 0
    assert main(["resplit", "--seed", "3", "--out", str(root / "split"), "--corpus", str(root / "corpus"), *base]) == 0
    assert main(["train", "--seed", "3", "--out", str(root / "train"), "--corpus", str(root / "corpus"),
                 "--split", str(root / "split"), *base]) == 0
    return root


def test_gen_synth_is_deterministic_and_reloads(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "gen-synth", "--seed", "3", "--out", str(tmp_path / "again"), *flags(TINY))
    assert code == 0
    for name in ("kg.tsv", "aliases.tsv", "samples.tsv", "words.vec", "relations.vec"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "corpus" / name).read_bytes()
    from repadapter.cli import load_corpus
    corpus = load_corpus(pipeline / "corpus")
    assert len(corpus.samples) > 0 and corpus.relations.dim == 8


def test_resplit_report(pipeline):
    rows = read_csv(pipeline / "split" / "report.csv")
    assert [r["split"] for r in rows] == ["train", "dev_seen", "dev_unseen", "test_seen", "test_unseen"]
    total = sum(1 for _ in open(pipeline / "corpus" / "samples.tsv"))
    assert sum(int(r["samples"]) for r in rows) == total


def test_train_outputs(pipeline):
    out = pipeline / "train"
    log_rows = read_csv(out / "train_log.csv")
    assert list(log_rows[0])[:4] == ["epoch", "loss", "dev-seen-acc", "dev-unseen-acc"]
    assert 1 <= len(log_rows) <= 2
    names = zipfile.ZipFile(out / "checkpoint.npz").namelist()
    assert {"adapter.fwd.w.npy", "adapter.rev.w.npy"} <= set(names)
    assert any(n.startswith("disc.") for n in names)
    assert (out / "pseudo_targets.vec").exists()
    assert "variant = adversarial-adapter-recon" in (out / "config.txt").read_text()


def test_saved_baseline_reproduces_adapter_training(pipeline, tmp_path):
    assert main(["train", "--seed", "3", "--out", str(tmp_path), "--corpus", str(pipeline / "corpus"),
                 "--split", str(pipeline / "split"), "--pseudo-targets", str(pipeline / "train" / "baseline.npz"),
                 *flags(TINY)]) == 0
    assert (tmp_path / "checkpoint.npz").read_bytes() == (pipeline / "train" / "checkpoint.npz").read_bytes()


def test_finetune_checkpoint_has_no_adapter(pipeline, tmp_path):
    base = flags(TINY)
    assert main(["train", "--out", str(tmp_path), "--corpus", str(pipeline / "corpus"), "--split",
                 str(pipeline / "split"), "--variant", "baseline-finetune", "--seed", "3", *base]) == 0
    names = zipfile.ZipFile(tmp_path / "checkpoint.npz").namelist()
    assert not any(n.startswith(("adapter.", "disc.")) for n in names)


def test_eval_schema_and_repeatability(pipeline, tmp_path):
    args = ["eval", "--corpus", str(pipeline / "corpus"), "--split", str(pipeline / "split"),
            "--checkpoint", str(pipeline / "train" / "checkpoint.npz")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert {r["split"] for r in rows} == {"test-seen", "test-unseen", "all"}
    assert {r["metric"] for r in rows} == {"micro", "macro", "seen-rate"}
    from repadapter.data import load_split
    split = load_split(pipeline / "split")
    v = {(r["split"], r["metric"]): float(r["value"]) for r in rows}
    ns, nu = len(split.test_seen), len(split.test_unseen)
    assert v[("all", "micro")] == pytest.approx((ns * v[("test-seen", "micro")] + nu * v[("test-unseen", "micro")])
                                                / (ns + nu), abs=1e-12)


def test_pca_and_kbqa(pipeline, tmp_path):
    common = ["--corpus", str(pipeline / "corpus"), "--split", str(pipeline / "split"),
              "--checkpoint", str(pipeline / "train" / "checkpoint.npz")]
    assert main(["pca", "--out", str(tmp_path / "pca"), *common]) == 0
    assert len(read_csv(tmp_path / "pca" / "pca.csv")) == int(TINY["n_relations"])
    assert main(["kbqa", "--out", str(tmp_path / "kbqa"), *common]) == 0
    for row in read_csv(tmp_path / "kbqa" / "kbqa.csv"):
        assert float(row["kbqa_accuracy"]) <= float(row["detection_micro"])


def test_ablate_and_crossval(pipeline, tmp_path):
    base = flags({**TINY, "epochs": "1"})
    assert main(["ablate", "--out", str(tmp_path / "abl"), "--corpus", str(pipeline / "corpus"), "--split",
                 str(pipeline / "split"), "--counts", "2,4", *base]) == 0
    rows = read_csv(tmp_path / "abl" / "ablation.csv")
    assert [(r["model"], r["count"]) for r in rows] == [("baseline-finetune", "2"), ("adversarial-adapter-recon", "2"),
                                                        ("baseline-finetune", "4"), ("adversarial-adapter-recon", "4")]
    assert main(["crossval", "--out", str(tmp_path / "cv"), "--corpus", str(pipeline / "corpus"), "--folds", "2",
                 "--variant", "basic-adapter", *base]) == 0
    rows = read_csv(tmp_path / "cv" / "crossval.csv")
    assert all("±" in r["formatted"] for r in rows)


def test_content_addressed_output(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    code, out1, _ = run(capsys, "gen-synth", "--seed", "1", *flags(TINY))
    code2, out2, _ = run(capsys, "gen-synth", "--seed", "2", *flags(TINY))
    assert code == code2 == 0
    assert out1 != out2 and out1.startswith("runs/gen-synth-seed1-")


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nlr = 0.01\nepochs = 3\n")
    resolved = resolve_config(read_config_file(cfg), {"epochs": "7"})
    assert resolved["lr"] == 0.01 and resolved["epochs"] == 7


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    with pytest.raises(ContractError):
        read_config_file(cfg)
    code, _, err = run(capsys, "gen-synth", "--config", str(cfg), "--out", str(tmp_path / "x"))
    assert code != 0 and len(err.splitlines()) == 1 and "learning_rate" in err


def test_missing_input_single_line_error(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--out", str(tmp_path / "e"), "--checkpoint", str(tmp_path / "nope.npz"))
    assert code == 1
    assert err.startswith("error: FileNotFoundError") and "nope.npz" in err and len(err.splitlines()) == 1


def test_bad_variant_and_usage_errors(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--variant", "magic", "--corpus", str(tmp_path))
    assert code == 1 and len(err.splitlines()) == 1
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    assert len(capsys.readouterr().err.strip().splitlines()) == 1
