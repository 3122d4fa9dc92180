"""Multi-seed comparisons shared by the acceptance suite and scripts/."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .benchmarks import build_ssl, build_zsl
from .config import ExperimentConfig
from .metrics import balanced_accuracy, imbalance_ratio, threshold_sweep
from .numkit import argmax_rows
from .trainer import RunResult, make_biased_teacher, train_run, zsl_run


@dataclass
class SeedOutcome:
    seed: int
    method: str
    balanced_acc: float
    final_imbalance: float
    epoch_imbalance: np.ndarray
    result: RunResult


def _outcome(seed, method, result: RunResult) -> SeedOutcome:
    m = result.metrics
    ir = m.epoch_imbalance("all")
    return SeedOutcome(seed, method, m.rows[-1]["balanced_test_acc"], float(ir[-1]) if ir.size else np.nan,
                       ir, result)


def ssl_compare(cfg: ExperimentConfig, seeds, methods=("fixmatch", "debiaspl")) -> dict[str, list[SeedOutcome]]:
    """Train every method on the same per-seed benchmark."""
    out = {m: [] for m in methods}
    for seed in seeds:
        train, test = build_ssl(cfg.data, seed)
        for method in methods:
            tc = replace(cfg.train, method=method, seed=seed)
            out[method].append(_outcome(seed, method, train_run(train, test, tc, cfg.aug)))
    return out


@dataclass
class ZslOutcome:
    seed: int
    teacher_balanced_acc: float
    teacher_imbalance: float
    students: dict


def zsl_compare(cfg: ExperimentConfig, seeds, methods=("fixmatch", "debiaspl")) -> list[ZslOutcome]:
    """Biased teacher, then one bootstrapped student per method, per seed."""
    rows = []
    for seed in seeds:
        b = build_zsl(cfg, seed)
        teacher = make_biased_teacher(b.source, b.target.features, cfg.zsl, seed=seed, hidden=cfg.train.hidden)
        C = b.test.num_classes
        t_bal = balanced_accuracy(argmax_rows(teacher.probs(b.test.features)), b.test.labels, C)
        t_ir = imbalance_ratio(np.bincount(argmax_rows(teacher.probs(b.target.features)), minlength=C))
        students = {}
        for method in methods:
            tc = replace(cfg.train, method=method, seed=seed)
            result, _ = zsl_run(b.target, b.test, teacher, cfg.zsl, tc, cfg.aug)
            students[method] = result.metrics.rows[-1]["balanced_test_acc"]
        rows.append(ZslOutcome(seed, t_bal, t_ir, students))
    return rows


def teacher_threshold_sweep(cfg: ExperimentConfig, seed: int, taus) -> list[dict]:
    b = build_zsl(cfg, seed)
    teacher = make_biased_teacher(b.source, b.target.features, cfg.zsl, seed=seed, hidden=cfg.train.hidden)
    return threshold_sweep(teacher.probs(b.target.features), b.target.labels, taus, b.target.num_classes)
