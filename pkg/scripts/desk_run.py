"""Desk-scale run on a real corpus: 32x32 inputs, filters 8/16/32/16, 5 epochs.

    python scripts/desk_run.py /path/to/corpus

Passes when validation accuracy beats the 0.50 majority baseline by 15 points.
"""
import argparse
import logging
import sys

from demenscan.experiments import DESK_CONFIG, run

BASELINE = 0.50
MARGIN = 0.15


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("corpus", help="root with NonDemented/ VeryMildDemented/ ... dirs")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    import dataclasses
    report = run(args.corpus, dataclasses.replace(DESK_CONFIG, seed=args.seed))
    print("\n".join(report.lines()))
    ok = report.metrics.final.val_acc >= BASELINE + MARGIN
    print(f"{'PASS' if ok else 'FAIL'}: val accuracy {report.metrics.final.val_acc:.4f} "
          f"vs required {BASELINE + MARGIN:.2f}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
