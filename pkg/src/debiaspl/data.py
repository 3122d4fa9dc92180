"""Synthetic Gaussian-mixture benchmarks: long-tailed class counts, labeled
splits, weak/strong feature augmentations and a rigid domain shift."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numkit import Stream, make_rng

MAX_CENTROID_TRIES = 10_000


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    dim: int = 8
    centroid_separation: float = 6.0
    cluster_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 2:
            raise ValueError("need at least 2 classes and 2 feature dimensions")
        if self.centroid_separation <= 0 or self.cluster_scale <= 0:
            raise ValueError("centroid_separation and cluster_scale must be positive")


@dataclass(frozen=True)
class ImbalanceSpec:
    """Exponential long-tail profile: class ``c`` gets ``n_max * gamma**(-c/(C-1))`` samples."""

    gamma: float = 1.0
    n_max: int = 500

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError(f"imbalance ratio gamma must be >= 1, got {self.gamma}")
        if self.n_max < 1:
            raise ValueError("n_max must be positive")

    def counts(self, num_classes: int) -> np.ndarray:
        c = np.arange(num_classes)
        raw = self.n_max * self.gamma ** (-c / (num_classes - 1))
        # round half up, not numpy's half-to-even
        return np.floor(raw + 0.5).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows with ground-truth labels and a labeled/unlabeled mask.

    ``labels`` is ground truth and is meant for evaluation only. Training code
    reads supervision through :meth:`labeled_targets`, which returns
    ``targets`` (e.g. teacher pseudo-labels) when set, else the ground truth of
    the labeled rows.
    """

    features: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    num_classes: int
    targets: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.labeled_mask.shape != (n,):
            raise ValueError("features, labels and labeled_mask disagree on row count")
        if self.targets is not None and self.targets.shape != (n,):
            raise ValueError("targets must have one entry per row")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def num_labeled(self) -> int:
        return int(self.labeled_mask.sum())

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labeled_mask)

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.labeled_mask)

    def labeled_targets(self) -> np.ndarray:
        """Training targets of the labeled rows, in :meth:`labeled_indices` order."""
        idx = self.labeled_indices()
        src = self.labels if self.targets is None else self.targets
        return src[idx]

    def with_mask(self, mask, targets=None) -> "Dataset":
        return replace(self, labeled_mask=np.asarray(mask, dtype=bool), targets=targets)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        t = None if self.targets is None else self.targets[idx]
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       labeled_mask=self.labeled_mask[idx], targets=t)

    @staticmethod
    def concat(a: "Dataset", b: "Dataset") -> "Dataset":
        if a.num_classes != b.num_classes or a.dim != b.dim:
            raise ValueError("datasets disagree on classes or dimension")
        if (a.targets is None) != (b.targets is None):
            raise ValueError("cannot concat a dataset with targets and one without")
        t = None if a.targets is None else np.concatenate([a.targets, b.targets])
        return Dataset(np.vstack([a.features, b.features]), np.concatenate([a.labels, b.labels]),
                       np.concatenate([a.labeled_mask, b.labeled_mask]), a.num_classes, t, dict(a.meta))


def make_centroids(spec: DatasetSpec) -> np.ndarray:
    """Rejection-sample ``C`` centroids with pairwise distance >= ``centroid_separation``."""
    rng = make_rng(spec.seed, Stream.DATA)
    # candidate spread grows with C so that C points fit at the requested spacing
    radius = spec.centroid_separation * max(1.0, spec.num_classes ** (1.0 / spec.dim))
    centroids = []
    tries = 0
    while len(centroids) < spec.num_classes:
        tries += 1
        if tries > MAX_CENTROID_TRIES:
            raise RuntimeError(
                f"could not place {spec.num_classes} centroids {spec.centroid_separation} apart "
                f"in {spec.dim} dimensions after {MAX_CENTROID_TRIES} tries"
            )
        cand = rng.standard_normal(spec.dim) * radius
        if all(np.linalg.norm(cand - c) >= spec.centroid_separation for c in centroids):
            centroids.append(cand)
    return np.array(centroids)


def generate_mixture(spec: DatasetSpec, imb: ImbalanceSpec, draw: int = 0) -> Dataset:
    """Sample a shuffled mixture with per-class counts from ``imb``.

    Centroids depend only on ``spec``; ``draw`` selects an independent sample
    set over the same centroids (use distinct draws for train and test pools).
    """
    centroids = make_centroids(spec)
    counts = imb.counts(spec.num_classes)
    rng = make_rng(spec.seed, Stream.DATA, 1 + draw)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    feats = centroids[labels] + spec.cluster_scale * rng.standard_normal((labels.size, spec.dim))
    order = rng.permutation(labels.size)
    meta = {"gamma": imb.gamma, "seed": spec.seed, "n_max": imb.n_max}
    return Dataset(feats[order], labels[order], np.zeros(labels.size, dtype=bool), spec.num_classes, None, meta)


def nearest_centroid(features, centroids) -> np.ndarray:
    d = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def split_labeled(ds: Dataset, budget, rng: np.random.Generator, balanced: bool | None = None,
                  min_per_class: int = 0) -> Dataset:
    """Mark a labeled subset.

    Balanced mode (integer ``budget``): exactly ``budget`` rows per class.
    Fraction mode (float ``budget``): ``floor(budget * n_c)`` rows per class,
    raised to ``min_per_class`` where the class has that many rows.
    """
    if balanced is None:
        balanced = isinstance(budget, (int, np.integer))
    counts = ds.class_counts
    if balanced:
        want = np.full(ds.num_classes, int(budget))
    else:
        if not 0.0 <= budget <= 1.0:
            raise ValueError(f"label fraction must lie in [0, 1], got {budget}")
        want = np.floor(budget * counts + 1e-9).astype(np.int64)
        want = np.maximum(want, np.minimum(min_per_class, counts))
    short = np.flatnonzero(want > counts)
    if short.size:
        c = int(short[0])
        raise ValueError(f"class {c} has {counts[c]} samples, {want[c]} labels requested")
    mask = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        mask[rng.choice(members, size=int(want[c]), replace=False)] = True
    return ds.with_mask(mask)


@dataclass(frozen=True)
class Augmentor:
    """Weak view: Gaussian jitter. Strong view: heavier jitter, then a random
    ``mask_fraction`` of coordinates per row set to zero."""

    weak_noise: float = 0.3
    strong_noise: float = 1.0
    mask_fraction: float = 0.25

    def __post_init__(self):
        if self.weak_noise < 0 or self.strong_noise < self.weak_noise:
            raise ValueError("need 0 <= weak_noise <= strong_noise")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must lie in [0, 1)")


def augment_weak(aug: Augmentor, x, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if aug.weak_noise == 0:
        return x.copy()
    return x + aug.weak_noise * rng.standard_normal(x.shape)


def augment_strong(aug: Augmentor, x, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x + aug.strong_noise * rng.standard_normal(x.shape) if aug.strong_noise else x.copy()
    k = int(round(aug.mask_fraction * x.shape[-1]))
    if k:
        flat = out.reshape(-1, x.shape[-1])
        cols = np.argsort(rng.random(flat.shape), axis=1)[:, :k]
        np.put_along_axis(flat, cols, 0.0, axis=1)
    return out


def shift_domain(ds: Dataset, rotation_angle: float, translation) -> Dataset:
    """Rotate the first two coordinates by ``rotation_angle`` and add ``translation``."""
    t = np.asarray(translation, dtype=np.float64)
    if t.shape != (ds.dim,):
        raise ValueError(f"translation has dimension {t.shape}, dataset has {ds.dim}")
    c, s = math.cos(rotation_angle), math.sin(rotation_angle)
    f = ds.features.copy()
    x0, x1 = f[:, 0].copy(), f[:, 1].copy()
    f[:, 0] = c * x0 - s * x1
    f[:, 1] = s * x0 + c * x1
    return replace(ds, features=f + t)


def write_dataset(ds: Dataset, path) -> None:
    """CSV ``f0..f{d-1},label,is_labeled`` (17 significant digits) plus a JSON sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(ds.dim)] + ["label", "is_labeled"])
        for row, y, lab in zip(ds.features, ds.labels, ds.labeled_mask):
            w.writerow([f"{v:.17g}" for v in row] + [int(y), int(lab)])
    side = {"C": ds.num_classes, "dim": ds.dim, "gamma": ds.meta.get("gamma"),
            "seed": ds.meta.get("seed"), "class_counts": ds.class_counts.tolist()}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 2
    if dim != side["dim"] or header[-2:] != ["label", "is_labeled"]:
        raise ValueError(f"{path}: header does not match sidecar")
    feats = np.array([[float(v) for v in r[:dim]] for r in body]).reshape(len(body), dim)
    labels = np.array([int(r[dim]) for r in body], dtype=np.int64)
    mask = np.array([r[dim + 1] == "1" for r in body], dtype=bool)
    ds = Dataset(feats, labels, mask, int(side["C"]), None, {"gamma": side["gamma"], "seed": side["seed"]})
    if ds.class_counts.tolist() != side["class_counts"]:
        raise ValueError(f"{path}: class counts disagree with sidecar")
    return ds
