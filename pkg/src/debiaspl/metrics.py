"""Pseudo-label bias diagnostics: histograms, imbalance ratio, per-class
precision/recall, confusion matrices, class-centroid similarity and
confidence-threshold sweeps, plus CSV emitters for each."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import argmax_rows

UNDEFINED = "undefined"


def imbalance_ratio(counts) -> float:
    """``max(counts) / min(counts)``; ``inf`` if some class is empty, 1 if all are."""
    c = np.asarray(counts, dtype=np.float64)
    if c.size == 0:
        raise ValueError("imbalance ratio of zero classes")
    hi, lo = c.max(), c.min()
    if hi == 0:
        return 1.0
    if lo == 0:
        return math.inf
    return float(hi / lo)


def histogram(labels, num_classes: int, accepted=None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if accepted is not None:
        y = y[np.asarray(accepted, dtype=bool)]
    return np.bincount(y, minlength=num_classes)


@dataclass
class PseudoLabelStats:
    """Per-class counts of accepted pseudo-labels with precision and recall.

    Cells whose denominator is zero hold ``nan`` and are written as
    ``undefined``; they are never averaged in as zeros.
    """

    counts: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    imbalance_ratio: float

    @property
    def mean_precision(self) -> float:
        return _nanmean(self.precision)

    @property
    def mean_recall(self) -> float:
        return _nanmean(self.recall)


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    ok = ~np.isnan(x)
    return float(x[ok].mean()) if ok.any() else math.nan


def _accepted(pred, accepted):
    pred = np.asarray(pred, dtype=np.int64)
    if accepted is None:
        return np.ones(pred.shape, dtype=bool)
    return np.asarray(accepted, dtype=bool)


def confusion(pred, truth, num_classes: int, accepted=None) -> np.ndarray:
    """Rows are true classes, columns predicted classes; only accepted rows are tallied."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("predictions and truth differ in length")
    keep = _accepted(pred, accepted)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth[keep], pred[keep]), 1)
    return cm


def per_class_pr(pred, truth, num_classes: int, accepted=None) -> PseudoLabelStats:
    """Precision = correct / predicted, recall = correct / true, over accepted rows.

    Recall uses the accepted rows of each true class as its denominator.
    """
    cm = confusion(pred, truth, num_classes, accepted)
    correct = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    true = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, correct / predicted, np.nan)
        recall = np.where(true > 0, correct / true, np.nan)
    return PseudoLabelStats(predicted, precision, recall, imbalance_ratio(predicted))


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float((pred == truth).mean()) if truth.size else math.nan


def balanced_accuracy(pred, truth, num_classes: int) -> float:
    """Mean of per-class recalls over classes present in ``truth``."""
    cm = confusion(pred, truth, num_classes)
    true = cm.sum(axis=1)
    present = true > 0
    return float((np.diag(cm)[present] / true[present]).mean())


def centroid_similarity(features, labels, num_classes: int) -> np.ndarray:
    """Cosine similarity between class centroids of L2-normalised features."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    f = f / np.where(norms > 0, norms, 1.0)
    cents = []
    for c in range(num_classes):
        rows = f[y == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no samples")
        cents.append(rows.mean(axis=0))
    cents = np.array(cents)
    cn = np.linalg.norm(cents, axis=1, keepdims=True)
    if np.any(cn == 0):
        raise ValueError("a class centroid is the zero vector")
    cents /= cn
    sim = cents @ cents.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def threshold_sweep(probs, truth, taus, num_classes: int | None = None) -> list[dict]:
    """Accept argmax predictions whose confidence is ``>= tau``, for each tau."""
    p = np.asarray(probs, dtype=np.float64)
    taus = [float(t) for t in taus]
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ValueError("taus must be sorted ascending")
    C = p.shape[1] if num_classes is None else num_classes
    pred = argmax_rows(p)
    conf = p.max(axis=1)
    out = []
    for tau in taus:
        acc = conf >= tau
        st = per_class_pr(pred, truth, C, acc)
        out.append({"tau": tau, "accepted": int(acc.sum()), "imbalance_ratio": st.imbalance_ratio,
                    "mean_precision": st.mean_precision, "mean_recall": st.mean_recall,
                    "counts": st.counts.tolist()})
    return out


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return UNDEFINED
        if math.isinf(v):
            return "inf"
        return repr(float(v))
    return str(v)


def write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_pr_table(stats: PseudoLabelStats, path) -> None:
    write_rows(path, ["class", "count", "precision", "recall"],
               [(c, int(stats.counts[c]), stats.precision[c], stats.recall[c]) for c in range(len(stats.counts))])


def write_confusion(cm, path) -> None:
    C = cm.shape[0]
    write_rows(path, ["true\\pred"] + [str(j) for j in range(C)], [[i] + cm[i].tolist() for i in range(C)])


def write_histogram(counts, path) -> None:
    write_rows(path, ["class", "count"], list(enumerate(int(v) for v in counts)))


def write_sweep(sweep: list[dict], path) -> None:
    write_rows(path, ["tau", "accepted", "imbalance_ratio", "mean_precision", "mean_recall"],
               [(s["tau"], s["accepted"], s["imbalance_ratio"], s["mean_precision"], s["mean_recall"]) for s in sweep])


def write_similarity(sim, path) -> None:
    C = sim.shape[0]
    write_rows(path, ["class"] + [str(j) for j in range(C)], [[i] + [float(v) for v in sim[i]] for i in range(C)])


DEFAULT_TAUS = (0.2, 0.4, 0.6, 0.8, 0.9, 0.95)


def report(out_dir, probs, truth, num_classes: int, taus=DEFAULT_TAUS, tau: float = 0.95,
           embeddings=None) -> dict:
    """Write histogram, PR table, confusion matrix and threshold sweep to ``out_dir``.

    ``probs`` are stored predictions (rows on the simplex). If ``embeddings``
    are given, a class-centroid similarity table is added as well.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    pred = argmax_rows(probs)
    accepted = probs.max(axis=1) >= tau
    stats = per_class_pr(pred, truth, num_classes, accepted)
    write_histogram(stats.counts, out / "histogram.csv")
    write_pr_table(stats, out / "precision_recall.csv")
    cm = confusion(pred, truth, num_classes, accepted)
    write_confusion(cm, out / "confusion.csv")
    sweep = threshold_sweep(probs, truth, taus, num_classes)
    write_sweep(sweep, out / "threshold_sweep.csv")
    index = {
        "num_classes": num_classes,
        "tau": tau,
        "accepted": int(accepted.sum()),
        "imbalance_ratio": _fmt(stats.imbalance_ratio),
        "accuracy_all": accuracy(pred, truth),
        "balanced_accuracy_all": balanced_accuracy(pred, truth, num_classes),
        "files": {"histogram": "histogram.csv", "precision_recall": "precision_recall.csv",
                  "confusion": "confusion.csv", "threshold_sweep": "threshold_sweep.csv"},
    }
    if embeddings is not None:
        write_similarity(centroid_similarity(embeddings, truth, num_classes), out / "centroid_similarity.csv")
        index["files"]["centroid_similarity"] = "centroid_similarity.csv"
        index["notes"] = ["centroid similarity uses the classifier's penultimate-layer activations"]
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index
