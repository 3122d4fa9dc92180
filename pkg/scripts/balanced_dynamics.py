"""Balanced pools with 4 labels per class: accuracy of both methods and the
per-epoch pseudo-label imbalance of DebiasPL, written to a CSV.

    python scripts/balanced_dynamics.py --out runs/balanced_dynamics.csv
"""
import argparse
from pathlib import Path

import numpy as np

from debiaspl.benchmarks import balanced_config
from debiaspl.experiments import ssl_compare
from debiaspl.metrics import write_rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--labels-per-class", type=int, default=4)
    ap.add_argument("--out", default="runs/balanced_dynamics.csv")
    args = ap.parse_args()
    runs = ssl_compare(balanced_config(args.labels_per_class), range(args.seeds))
    for method, outs in runs.items():
        accs = [o.balanced_acc for o in outs]
        print(f"{method:<10} balanced acc {100 * np.mean(accs):.2f} ± {100 * np.std(accs, ddof=1):.2f}")
    rows = [[o.seed, e, v] for o in runs["debiaspl"] for e, v in enumerate(o.epoch_imbalance)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_rows(args.out, ["seed", "epoch", "imbalance_ratio"], rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
