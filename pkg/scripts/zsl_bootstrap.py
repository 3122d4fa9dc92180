"""Biased teacher vs bootstrapped FixMatch and DebiasPL students on the
balanced target, plus the teacher's threshold sweep for one seed.

    python scripts/zsl_bootstrap.py --seeds 5
"""
import argparse

import numpy as np

from debiaspl.config import ExperimentConfig
from debiaspl.experiments import teacher_threshold_sweep, zsl_compare
from debiaspl.metrics import DEFAULT_TAUS


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    cfg = ExperimentConfig()
    rows = zsl_compare(cfg, range(args.seeds))
    print(f"{'seed':>4}  {'teacher':>7}  {'fixmatch':>8}  {'debiaspl':>8}  {'teacher ir':>10}")
    for r in rows:
        print(f"{r.seed:>4}  {r.teacher_balanced_acc:7.3f}  {r.students['fixmatch']:8.3f}  "
              f"{r.students['debiaspl']:8.3f}  {r.teacher_imbalance:10.2f}")
    for key in ("fixmatch", "debiaspl"):
        print(f"mean {key}: {100 * np.mean([r.students[key] for r in rows]):.2f}%")
    print(f"mean teacher: {100 * np.mean([r.teacher_balanced_acc for r in rows]):.2f}%")
    print("\nteacher threshold sweep (seed 0)")
    for s in teacher_threshold_sweep(cfg, 0, DEFAULT_TAUS):
        print(f"  tau={s['tau']:<5} accepted={s['accepted']:>5} imbalance={s['imbalance_ratio']:.2f} "
              f"precision={s['mean_precision']:.3f}")


if __name__ == "__main__":
    main()
