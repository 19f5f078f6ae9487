"""Command-line entry point: ``repadapter <command> [--config FILE] [--seed N] [--out DIR] [--key value ...]``.

Configuration files are flat ``key = value`` text; ``#`` starts a comment.
Command-line flags override file values. Every output directory receives a
``config.txt`` with the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path


from .autodiff import ContractError
from .data import (
    SynthConfig, balanced_resplit, generate_synthetic_corpus, load_dataset, load_embeddings, load_kg,
    load_split, resplit_report, save_dataset, save_embeddings, save_kg, save_split, synthetic_targets,
    SQB_TARGETS,
)
from .encoders import EmbeddingTable
from .evaluation import (
    METRIC_ROWS, cross_validate, evaluate_split, pca_project, predict_samples, micro_accuracy,
    relation_count_ablation, write_metric_csv,
)
from .kbqa import TripleIndex, answer_all, kbqa_accuracy, write_answers
from .model import ModelVariant
from .training import (
    TrainConfig, load_checkpoint, pretrain_baseline, save_checkpoint, train_with_adapter,
)
from .adapter import PseudoTargetStore

log = logging.getLogger("repadapter")

COMMANDS = ("gen-synth", "resplit", "train", "eval", "kbqa", "ablate", "pca", "crossval")

# key -> (parser, default); TrainConfig and SynthConfig fields are added below
_EXTRA_KEYS = {
    "corpus": (str, "corpus"),
    "split": (str, "split"),
    "checkpoint": (str, "checkpoint.npz"),
    "pseudo_targets": (str, ""),
    "variant": (str, ModelVariant.ADVERSARIAL_RECON.value),
    "split_targets": (str, "synthetic"),
    "tolerance": (float, 0.25),
    "n_unseen_relations": (str, "auto"),
    "folds": (int, 10),
    "counts": (str, "5,10,20,30"),
    "budget": (str, "none"),
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _schema() -> dict:
    schema = {}
    for cls in (TrainConfig, SynthConfig):
        for f in dataclasses.fields(cls):
            default = f.default
            kind = _parse_bool if isinstance(default, bool) else type(default)
            schema[f.name] = (kind, default)
    schema.update(_EXTRA_KEYS)
    return schema


SCHEMA = _schema()


def read_config_file(path) -> dict[str, str]:
    """Raw ``key -> text`` pairs from a flat config file; unknown keys are errors."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{no}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ContractError(f"{path}:{no}: unknown config key {key!r}")
            out[key] = value
    return out


def resolve_config(file_values: dict[str, str], overrides: dict[str, str]) -> dict:
    """Typed configuration: defaults, then file values, then overrides."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    for source in (file_values, overrides):
        for key, text in source.items():
            if key not in SCHEMA:
                raise ContractError(f"unknown config key {key!r}")
            try:
                cfg[key] = SCHEMA[key][0](text)
            except ValueError as exc:
                raise ContractError(f"bad value for {key}: {exc}") from None
    return cfg


def config_text(command: str, cfg: dict) -> str:
    lines = [f"command = {command}"] + [f"{k} = {cfg[k]!r}" if isinstance(cfg[k], float) else f"{k} = {cfg[k]}"
                                        for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def output_dir(command: str, cfg: dict, out: str | None) -> Path:
    if out:
        path = Path(out)
    else:
        digest = hashlib.sha256(config_text(command, cfg).encode("utf-8")).hexdigest()[:12]
        path = Path("runs") / f"{command}-seed{cfg['seed']}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(config_text(command, cfg), encoding="utf-8")
    return path


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f.name] for f in dataclasses.fields(TrainConfig)})


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(**{f.name: cfg[f.name] for f in dataclasses.fields(SynthConfig)})


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return path


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "auto", "") else int(text)


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- corpus access ------------------------------------------------------------


@dataclasses.dataclass
class Corpus:
    kg: object
    samples: list
    words: EmbeddingTable
    relations: EmbeddingTable
    n_unseen: int | None


def save_corpus(corpus, directory: Path) -> None:
    save_kg(corpus.kg, directory / "kg.tsv", directory / "aliases.tsv")
    save_dataset(corpus.samples, directory / "samples.tsv")
    save_embeddings(corpus.words, directory / "words.vec")
    save_embeddings(corpus.relations, directory / "relations.vec")
    (directory / "corpus.txt").write_text(f"n_unseen = {corpus.n_unseen}\n", encoding="utf-8")


def load_corpus(directory) -> Corpus:
    d = _require(directory)
    kg = load_kg(_require(d / "kg.tsv"), _require(d / "aliases.tsv"))
    n_unseen = None
    meta = d / "corpus.txt"
    if meta.exists():
        for line in meta.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "n_unseen":
                n_unseen = int(value)
    return Corpus(kg, load_dataset(_require(d / "samples.tsv")), load_embeddings(_require(d / "words.vec")),
                  load_embeddings(_require(d / "relations.vec")), n_unseen)


def _split_targets(cfg: dict) -> dict:
    if cfg["split_targets"] == "sqb":
        return dict(SQB_TARGETS)
    if cfg["split_targets"] == "synthetic":
        return synthetic_targets(cfg["seen_fraction"])
    raise ContractError(f"split_targets must be 'synthetic' or 'sqb', got {cfg['split_targets']!r}")


def _n_unseen(cfg: dict, corpus: Corpus) -> int | None:
    if cfg["n_unseen_relations"].strip().lower() == "auto":
        return corpus.n_unseen
    return _optional_int(cfg["n_unseen_relations"])


# -- commands ----------------------------------------------------------------


def cmd_gen_synth(cfg: dict, out: Path) -> None:
    corpus = generate_synthetic_corpus(synth_config(cfg), cfg["seed"])
    save_corpus(corpus, out)
    log.info("wrote %d samples, %d triples to %s", len(corpus.samples), len(corpus.kg.triples), out)


def cmd_resplit(cfg: dict, out: Path) -> None:
    corpus = load_corpus(cfg["corpus"])
    split = balanced_resplit(corpus.samples, cfg["seed"], _split_targets(cfg), cfg["tolerance"],
                             _n_unseen(cfg, corpus))
    save_split(split, out)
    _write_csv(out / "report.csv", ["split", "samples", "seen_relations", "unseen_relations"],
               resplit_report(split))


def _log_rows(history):
    for row in history:
        out = {"epoch": row["epoch"], "loss": repr(row["loss"]), "dev-seen-acc": repr(row["dev_seen_acc"]),
               "dev-unseen-acc": repr(row["dev_unseen_acc"])}
        for key in ("rd", "adapter", "recon", "critic"):
            out[key] = repr(row[key]) if key in row else ""
        out["critic-steps"] = row.get("critic_steps", 0)
        out["generator-steps"] = row.get("generator_steps", 0)
        yield out


def cmd_train(cfg: dict, out: Path) -> None:
    corpus = load_corpus(cfg["corpus"])
    split = load_split(_require(cfg["split"]))
    variant = ModelVariant.parse(cfg["variant"])
    tc = train_config(cfg)
    source = cfg["pseudo_targets"]
    if variant is ModelVariant.BASELINE_FINETUNE or (variant.needs_targets and not source):
        trained, targets = pretrain_baseline(split, corpus.kg, corpus.words, corpus.relations, tc)
        save_embeddings(targets.as_table(), out / "pseudo_targets.vec")
        pretrained = trained
        if variant is not ModelVariant.BASELINE_FINETUNE:
            save_checkpoint(trained, out / "baseline.npz")
    elif not variant.needs_targets:
        pretrained = None
    elif source.endswith(".npz"):
        # a saved baseline: warm start plus its pseudo targets
        pretrained = load_checkpoint(_require(source))
    else:
        pretrained = PseudoTargetStore.from_table(load_embeddings(_require(source)))
    if variant is not ModelVariant.BASELINE_FINETUNE:
        trained = train_with_adapter(split, corpus.kg, corpus.words, corpus.relations, pretrained, variant, tc)
    save_checkpoint(trained, out / "checkpoint.npz")
    _write_csv(out / "train_log.csv", ["epoch", "loss", "dev-seen-acc", "dev-unseen-acc", "rd", "adapter",
                                       "recon", "critic", "critic-steps", "generator-steps"], _log_rows(trained.log))


def _load_model(cfg):
    return load_checkpoint(_require(cfg["checkpoint"]))


def cmd_eval(cfg: dict, out: Path) -> None:
    trained = _load_model(cfg)
    corpus = load_corpus(cfg["corpus"])
    split = load_split(_require(cfg["split"]))
    metrics = evaluate_split(trained.model, split, corpus.kg)
    _write_csv(out / "metrics.csv", ["split", "metric", "value"],
               [{"split": s, "metric": m, "value": repr(metrics[(s, m)])} for s, m in METRIC_ROWS
                if (s, m) in metrics])


def cmd_kbqa(cfg: dict, out: Path) -> None:
    trained = _load_model(cfg)
    corpus = load_corpus(cfg["corpus"])
    split = load_split(_require(cfg["split"]))
    index = TripleIndex(corpus.kg)
    rows, all_preds = [], []
    for name in ("test_seen", "test_unseen"):
        samples = split[name]
        if not samples:
            continue
        preds = answer_all([s.question for s in samples], trained.model, index)
        all_preds += preds
        detect = micro_accuracy(predict_samples(trained.model, samples, corpus.kg, split.seen))
        rows.append({"set": name.replace("_", "-"), "kbqa_accuracy": repr(kbqa_accuracy(preds, samples)),
                     "detection_micro": repr(detect), "unanswerable": sum(p is None for p in preds)})
    golds = split.test_seen + split.test_unseen
    detect = micro_accuracy(predict_samples(trained.model, golds, corpus.kg, split.seen))
    rows.append({"set": "all", "kbqa_accuracy": repr(kbqa_accuracy(all_preds, golds)),
                 "detection_micro": repr(detect), "unanswerable": sum(p is None for p in all_preds)})
    write_answers(out / "answers.tsv", all_preds)
    _write_csv(out / "kbqa.csv", ["set", "kbqa_accuracy", "detection_micro", "unanswerable"], rows)


def cmd_ablate(cfg: dict, out: Path) -> None:
    corpus = load_corpus(cfg["corpus"])
    split = load_split(_require(cfg["split"]))
    counts = [int(c) for c in cfg["counts"].split(",") if c.strip()]
    rows = relation_count_ablation(split, corpus.kg, corpus.words, corpus.relations, counts,
                                   _optional_int(cfg["budget"]), train_config(cfg))
    _write_csv(out / "ablation.csv", ["model", "count", "macro_unseen"],
               [{**r, "macro_unseen": repr(r["macro_unseen"])} for r in rows])


def cmd_pca(cfg: dict, out: Path) -> None:
    trained = _load_model(cfg)
    m = trained.model
    vecs = m.relation_vectors()
    proj, shares = pca_project({n: vecs[i] for i, n in enumerate(m.relation_names)}, seed=cfg["seed"])
    seen = set(trained.seen)
    _write_csv(out / "pca.csv", ["relation", "seen", "x", "y"],
               [{"relation": n, "seen": int(n in seen), "x": repr(float(proj[n][0])), "y": repr(float(proj[n][1]))}
                for n in m.relation_names])
    _write_csv(out / "pca_variance.csv", ["component", "share"],
               [{"component": i + 1, "share": repr(float(s))} for i, s in enumerate(shares)])


def cmd_crossval(cfg: dict, out: Path) -> None:
    corpus = load_corpus(cfg["corpus"])
    runs, _ = cross_validate(corpus, cfg["folds"], cfg["variant"], train_config(cfg), cfg["seed"],
                             _split_targets(cfg), cfg["tolerance"], _n_unseen(cfg, corpus))
    _write_csv(out / "folds.csv", ["fold", "split", "metric", "value"],
               [{"fold": i, "split": s, "metric": m, "value": repr(r[(s, m)])}
                for i, r in enumerate(runs) for s, m in METRIC_ROWS if (s, m) in r])
    write_metric_csv(out / "crossval.csv", runs, formatted=True)


HANDLERS = {
    "gen-synth": cmd_gen_synth, "resplit": cmd_resplit, "train": cmd_train, "eval": cmd_eval,
    "kbqa": cmd_kbqa, "ablate": cmd_ablate, "pca": cmd_pca, "crossval": cmd_crossval,
}
HELP = {
    "gen-synth": "write a synthetic corpus (KG, aliases, samples, word and relation vectors)",
    "resplit": "split a corpus into train/dev/test with disjoint unseen relations",
    "train": "train one detector variant and save a checkpoint",
    "eval": "relation detection accuracy and seen rate on the test sets",
    "kbqa": "end-to-end answers with entity linking over the KG",
    "ablate": "unseen macro accuracy versus number of training relations",
    "pca": "2-d PCA of the model's relation-level vectors",
    "crossval": "repeated seeded resplits of one corpus, mean and std",
}


class _OneLineParser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--out", help="output directory (default: content-addressed under runs/)")
    common.add_argument("-v", "--verbose", action="store_true")
    for key in SCHEMA:
        if key == "seed":
            continue
        common.add_argument(f"--{key.replace('_', '-')}", dest=f"set_{key}", metavar="VALUE")
    parser = _OneLineParser(prog="repadapter", description="Relation detection for unseen relations with a representation adapter.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_OneLineParser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = resolve_config(file_values, overrides)
        out = output_dir(args.command, cfg, args.out)
        HANDLERS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line on stderr
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
