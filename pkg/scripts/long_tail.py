"""FixMatch vs DebiasPL on the long-tailed benchmark: per-seed balanced
accuracy and final pseudo-label imbalance, then the mean gain.

    python scripts/long_tail.py --seeds 0-4
"""
import argparse

import numpy as np

from debiaspl.benchmarks import long_tail_config
from debiaspl.experiments import ssl_compare


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=seed_range, default=range(5))
    ap.add_argument("--steps", type=int, default=3000)
    args = ap.parse_args()
    cfg = long_tail_config(train__total_steps=args.steps)
    runs = ssl_compare(cfg, args.seeds)
    print(f"{'seed':>4}  {'fixmatch':>8}  {'debiaspl':>8}  {'ir fixmatch':>11}  {'ir debiaspl':>11}")
    for f, d in zip(runs["fixmatch"], runs["debiaspl"]):
        print(f"{f.seed:>4}  {f.balanced_acc:8.3f}  {d.balanced_acc:8.3f}  {f.final_imbalance:11.2f}  "
              f"{d.final_imbalance:11.2f}")
    gain = np.mean([o.balanced_acc for o in runs["debiaspl"]]) - np.mean([o.balanced_acc for o in runs["fixmatch"]])
    print(f"mean balanced accuracy gain: {100 * gain:+.2f} points")


if __name__ == "__main__":
    main()
