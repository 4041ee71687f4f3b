"""Full protocol: 128x128 inputs, filters 32/64/128/64, 20 epochs, batch 32,
80/20 stratified hold-out followed by stratified 5-fold CV.

    python scripts/reproduce_full.py /path/to/corpus [--folds 5] [--out report.json]

Pure numpy on CPU; expect many hours for the hold-out run and five times that
for the K-fold pass (use --folds 0 to skip it).
"""
import argparse
import dataclasses
import json
import logging
import sys

from demenscan.experiments import FULL_CONFIG, run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("corpus")
    parser.add_argument("--folds", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="write the comparison as JSON here")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    report = run(args.corpus, dataclasses.replace(FULL_CONFIG, seed=args.seed), folds=args.folds)
    print("\n".join(report.lines()))
    print()
    print("\n".join(report.reference_lines()))
    if args.out:
        f = report.metrics.final
        payload = {"epochs": [vars(e) for e in report.metrics.epochs],
                   "val_per_class": report.val_per_class,
                   "confusion": report.confusion.tolist(),
                   "final": vars(f)}
        if report.kfold is not None:
            payload["kfold"] = {"folds": report.kfold.fold_accuracies,
                                "mean": report.kfold.mean, "std": report.kfold.std}
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
