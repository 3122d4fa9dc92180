"""Command-line entry point: ``debiaspl {gen-data,train,zsl,analyze,sweep}``.

Every run writes its own directory holding a ``config.snapshot`` that
reproduces it (``debiaspl train --config DIR/config.snapshot``).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as mt
from .benchmarks import build_ssl, build_zsl
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .data import write_dataset
from .nn import forward, penultimate
from .numkit import argmax_rows, softmax_rows
from .trainer import (DivergedError, RunResult, TeacherCheckError, evaluate, make_biased_teacher, save_run,
                      timed, train_run, zsl_run)

OUT_ENV = "DEBIASPL_OUT"
DEFAULT_SWEEP_LAMBDAS = (0.0, 0.25, 0.5, 1.0)


class RunCheckError(RuntimeError):
    pass


# --- config plumbing ---------------------------------------------------------

def _csv_list(text: str, conv):
    try:
        return tuple(conv(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None


def load_config(args) -> ExperimentConfig:
    text = ""
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        text = p.read_text()
    overrides = list(args.override or [])
    if getattr(args, "method", None) and "," not in args.method:
        overrides.append(f"train.method={args.method}")
    if getattr(args, "lam", None) and len(args.lam) == 1:
        overrides.append(f"train.lam={args.lam[0]!r}")
    if args.seed:
        overrides.append("run.seeds=" + ",".join(str(s) for s in args.seed))
    if args.out:
        overrides.append(f"run.out={args.out}")
    elif os.environ.get(OUT_ENV):
        overrides.append(f"run.out={os.environ[OUT_ENV]}")
    return parse_config(text, overrides)


def for_seed(cfg: ExperimentConfig, seed: int, **train_kw) -> ExperimentConfig:
    """Copy of ``cfg`` pinned to one seed (the form written to snapshots)."""
    return ExperimentConfig(cfg.data, cfg.aug, replace(cfg.train, seed=seed, **train_kw), cfg.zsl,
                            replace(cfg.run, seeds=(seed,)))


# --- run checks and outputs ----------------------------------------------------

def check_run(result: RunResult) -> list[str]:
    """Internal invariants every completed run must satisfy."""
    bad = []
    for step, p in result.metrics.p_hat_trace:
        if abs(p.sum() - 1.0) > 1e-9 or p.min() < 1e-9:
            bad.append(f"p_hat left the floored simplex at step {step}")
            break
    for row in result.metrics.rows:
        if not (math.isfinite(row["loss_s"]) and math.isfinite(row["loss_u"])):
            bad.append(f"non-finite loss at step {row['step']}")
            break
    return bad


def write_predictions(params, ds, out_dir: Path) -> None:
    """Test-set probabilities (``predictions.csv``) and penultimate features (``embeddings.csv``)."""
    probs = softmax_rows(forward(params, ds.features))
    C = probs.shape[1]
    mt.write_rows(out_dir / "predictions.csv", ["label"] + [f"p_{j}" for j in range(C)],
                  [[int(y)] + [float(v) for v in row] for y, row in zip(ds.labels, probs)])
    emb = penultimate(params, ds.features)
    mt.write_rows(out_dir / "embeddings.csv", [f"h_{j}" for j in range(emb.shape[1])],
                  [[float(v) for v in row] for row in emb])


def _finish(result: RunResult, test, cfg: ExperimentConfig, run_dir: Path, wall: float, extra=None) -> dict:
    bad = check_run(result)
    summary = save_run(run_dir, result, test, serialize_config(cfg),
                       {"seed": cfg.train.seed, "method": cfg.train.method, "lam": cfg.train.lam,
                        "invariant_violations": bad, **(extra or {})}, wall)
    if test is not None:
        write_predictions(result.ema, test, run_dir)
    return summary


def _ssl_job(cfg_text: str, run_dir: str) -> dict:
    cfg = parse_config(cfg_text)
    train, test = build_ssl(cfg.data, cfg.train.seed)
    result, wall = timed(train_run, train, test, cfg.train, cfg.aug)
    return _finish(result, test, cfg, Path(run_dir), wall)


def _run_jobs(jobs: list[tuple[str, str]], workers: int) -> list[dict]:
    if workers <= 1 or len(jobs) <= 1:
        return [_ssl_job(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_ssl_job, *zip(*jobs)))


def _report_line(tag: str, s: dict) -> str:
    acc = s.get("balanced_test_acc", float("nan"))
    ir = s.get("final_pseudo_label_imbalance", float("nan"))
    return f"{tag}: balanced_test_acc={acc:.4f} final_pseudo_label_imbalance={ir}"


def _raise_on_violations(summaries) -> None:
    bad = [v for s in summaries for v in s["invariant_violations"]]
    if bad:
        raise RunCheckError("; ".join(bad))


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = load_config(args)
    root = Path(cfg.run.out)
    for seed in cfg.run.seeds:
        d = root / f"data-seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        if args.kind == "ssl":
            train, test = build_ssl(cfg.data, seed)
            write_dataset(train, d / "train.csv")
        else:
            b = build_zsl(cfg, seed)
            write_dataset(b.source.with_mask(np.ones(len(b.source), dtype=bool)), d / "source.csv")
            write_dataset(b.target, d / "target.csv")
            test = b.test
        write_dataset(test, d / "test.csv")
        (d / "config.snapshot").write_text(serialize_config(for_seed(cfg, seed)))
        print(f"wrote {d}")


def cmd_train(args) -> None:
    cfg = load_config(args)
    root = Path(cfg.run.out)
    jobs = []
    for seed in cfg.run.seeds:
        c = for_seed(cfg, seed)
        jobs.append((serialize_config(c), str(root / f"{c.train.method}-seed{seed}")))
    summaries = _run_jobs(jobs, _workers(cfg, len(jobs)))
    for (_, d), s in zip(jobs, summaries):
        print(_report_line(d, s))
    _raise_on_violations(summaries)


def cmd_zsl(args) -> None:
    cfg = load_config(args)
    root = Path(cfg.run.out)
    summaries = []
    for seed in cfg.run.seeds:
        c = for_seed(cfg, seed)
        b = build_zsl(c, seed)
        teacher = make_biased_teacher(b.source, b.target.features, c.zsl, seed=seed, hidden=c.train.hidden)
        run_dir = root / f"zsl-{c.train.method}-seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        t_probs = teacher.probs(b.target.features)
        sweep = mt.threshold_sweep(t_probs, b.target.labels, mt.DEFAULT_TAUS, b.target.num_classes)
        mt.write_sweep(sweep, run_dir / "teacher_threshold_sweep.csv")
        t_pred = argmax_rows(teacher.probs(b.test.features))
        teacher_bal = mt.balanced_accuracy(t_pred, b.test.labels, b.test.num_classes)
        (result, counts), wall = timed(zsl_run, b.target, b.test, teacher, c.zsl, c.train, c.aug)
        s = _finish(result, b.test, c, run_dir, wall,
                    {"teacher_balanced_test_acc": teacher_bal, "bootstrap_counts": counts.tolist()})
        summaries.append(s)
        print(_report_line(str(run_dir), s) + f" teacher_balanced_test_acc={teacher_bal:.4f}")
    _raise_on_violations(summaries)


def _read_predictions(path: Path):
    with path.open() as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no prediction rows")
    header, body = rows[0], rows[1:]
    if header[0] != "label":
        raise ValueError(f"{path}: first column must be 'label'")
    data = np.array(body, dtype=np.float64)
    return data[:, 1:], data[:, 0].astype(np.int64)


def cmd_analyze(args) -> None:
    src = Path(args.path)
    pred_path = src / "predictions.csv" if src.is_dir() else src
    if not pred_path.is_file():
        raise FileNotFoundError(f"no stored predictions at {pred_path}")
    probs, truth = _read_predictions(pred_path)
    emb_path = pred_path.with_name("embeddings.csv")
    emb = None
    if emb_path.is_file():
        emb = np.loadtxt(emb_path, delimiter=",", skiprows=1, ndmin=2)
    out = Path(args.out or (pred_path.parent / "analysis"))
    index = mt.report(out, probs, truth, probs.shape[1], tau=args.tau, embeddings=emb)
    print(f"wrote {out} ({len(index['files'])} tables)")


def _mean_std(xs) -> tuple[float, float]:
    a = np.array(xs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _ir_value(v) -> float:
    return math.inf if v == "inf" else float(v)


def cmd_sweep(args) -> None:
    cfg = load_config(args)
    root = Path(cfg.run.out)
    methods = args.method.split(",") if args.method else ["fixmatch", "debiaspl"]
    lams = args.lam or DEFAULT_SWEEP_LAMBDAS
    cells = []
    for method in methods:
        for lam in (lams if method == "debiaspl" else (cfg.train.lam,)):
            cells.append((method, lam))
    jobs, keys = [], []
    for method, lam in cells:
        for seed in cfg.run.seeds:
            c = for_seed(cfg, seed, method=method, lam=lam)
            tag = f"{method}-lam{lam:g}-seed{seed}" if method == "debiaspl" else f"{method}-seed{seed}"
            jobs.append((serialize_config(c), str(root / tag)))
            keys.append((method, lam))
    summaries = _run_jobs(jobs, _workers(cfg, len(jobs)))
    rows = []
    for method, lam in cells:
        ss = [s for k, s in zip(keys, summaries) if k == (method, lam)]
        acc = _mean_std([s["balanced_test_acc"] for s in ss])
        irs = [_ir_value(s.get("final_pseudo_label_imbalance", "nan")) for s in ss]
        finite = [v for v in irs if math.isfinite(v)]
        ir = _mean_std(finite) if finite else (math.nan, math.nan)
        rows.append([method, lam if method == "debiaspl" else "-", len(ss), acc[0], acc[1], ir[0], ir[1],
                     len(irs) - len(finite)])
    header = ["method", "lambda", "seeds", "balanced_acc_mean", "balanced_acc_std", "imbalance_mean",
              "imbalance_std", "imbalance_inf_count"]
    root.mkdir(parents=True, exist_ok=True)
    mt.write_rows(root / "sweep_summary.csv", header, rows)
    print(f"{'method':<12} {'lambda':>6}  balanced acc (%)   final imbalance")
    for r in rows:
        lam = r[1] if r[1] == "-" else f"{r[1]:g}"
        print(f"{r[0]:<12} {lam:>6}  {100 * r[3]:6.2f} ± {100 * r[4]:5.2f}    {r[5]:.2f} ± {r[6]:.2f}"
              + (f" (+{r[7]} inf)" if r[7] else ""))
    _raise_on_violations(summaries)


def _workers(cfg: ExperimentConfig, n_jobs: int) -> int:
    if cfg.run.workers:
        return cfg.run.workers
    return max(1, min(n_jobs, os.cpu_count() or 1))


# --- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file (see README)")
    common.add_argument("--seed", type=lambda s: _csv_list(s, int), metavar="N[,N...]",
                        help="seed list; overrides run.seeds")
    common.add_argument("--out", metavar="DIR",
                        help=f"output root; defaults to ${OUT_ENV}, then run.out from the config")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable (e.g. train.total_steps=500)")

    p = argparse.ArgumentParser(prog="debiaspl", description="Debiased pseudo-labeling experiments at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write generated datasets as CSV")
    g.add_argument("--kind", choices=("ssl", "zsl"), default="ssl")
    g.set_defaults(func=cmd_gen_data)

    for name, fn, helptext in (("train", cmd_train, "semi-supervised training runs"),
                               ("zsl", cmd_zsl, "biased teacher, bootstrap and student training")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--method", help="fixmatch | debiaspl | fixmatch+da | fixmatch+la")
        t.add_argument("--lambda", dest="lam", type=lambda s: _csv_list(s, float), metavar="X",
                       help="debias factor for both coefficients")
        t.set_defaults(func=fn)

    a = sub.add_parser("analyze", help="bias diagnostics on stored predictions")
    a.add_argument("path", help="run directory or predictions.csv")
    a.add_argument("--tau", type=float, default=0.95, help="acceptance threshold for histogram and PR table")
    a.add_argument("--out", metavar="DIR", help="output directory (default: PATH/analysis)")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", parents=[common], help="seed x method x lambda grid with a mean±std table")
    s.add_argument("--method", help="comma-separated methods (default fixmatch,debiaspl)")
    s.add_argument("--lambda", dest="lam", type=lambda x: _csv_list(x, float), metavar="X[,X...]",
                   help="lambda grid for debiaspl (default 0,0.25,0.5,1)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, TeacherCheckError, DivergedError, RunCheckError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
