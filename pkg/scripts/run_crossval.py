"""Repeated random resplits of the synthetic corpus for one variant, reported as mean±std.

    python3 scripts/run_crossval.py --folds 10 --variant adversarial-adapter-recon
"""

import argparse
import logging

from repadapter.data import generate_synthetic_corpus, synthetic_targets
from repadapter.evaluation import cross_validate, format_pm
from repadapter.experiments import SPLIT_TOLERANCE, SYNTH_PRESET, TRAIN_PRESET, VARIANTS


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--folds", type=int, default=10)
    parser.add_argument("--variant", default="adversarial-adapter-recon", choices=VARIANTS)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    corpus = generate_synthetic_corpus(SYNTH_PRESET, args.seed)
    _, summary = cross_validate(corpus, args.folds, args.variant, TRAIN_PRESET, args.seed,
                                synthetic_targets(SYNTH_PRESET.seen_fraction), SPLIT_TOLERANCE, corpus.n_unseen)
    for (split, metric), (mean, std) in summary.items():
        logging.info("%-12s %-10s %s", split, metric, format_pm(mean, std))


if __name__ == "__main__":
    main()
