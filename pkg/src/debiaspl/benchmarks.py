"""Builders for the desk-scale benchmarks: long-tailed and balanced SSL pools
and the shifted-source / balanced-target zero-shot setup."""
from __future__ import annotations

from dataclasses import dataclass

from .config import DataConfig, ExperimentConfig
from .data import Dataset, DatasetSpec, ImbalanceSpec, generate_mixture, split_labeled
from .numkit import Stream, make_rng

TRAIN_DRAW, TEST_DRAW, LABELED_DRAW, SOURCE_DRAW = 0, 1, 2, 3


def dataset_spec(dc: DataConfig, seed: int) -> DatasetSpec:
    return DatasetSpec(dc.num_classes, dc.dim, dc.centroid_separation, dc.cluster_scale, seed)


def balanced_test_set(dc: DataConfig, seed: int) -> Dataset:
    return generate_mixture(dataset_spec(dc, seed), ImbalanceSpec(1.0, dc.test_per_class), draw=TEST_DRAW)


def build_ssl(dc: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Training pool with a labeled subset, plus a balanced held-out test set.

    ``labels_per_class`` selects balanced labeling; otherwise
    ``label_fraction`` of each class is labeled. With ``labeled_gamma`` set,
    labels come from a separate long-tailed pool instead.
    """
    spec = dataset_spec(dc, seed)
    pool = generate_mixture(spec, ImbalanceSpec(dc.unlabeled_gamma, dc.unlabeled_n_max), draw=TRAIN_DRAW)
    split_rng = make_rng(seed, Stream.SPLIT)
    if dc.labeled_gamma is not None:
        n_max = dc.labeled_n_max or dc.unlabeled_n_max
        lab = generate_mixture(spec, ImbalanceSpec(dc.labeled_gamma, n_max), draw=LABELED_DRAW)
        if dc.labels_per_class is not None:
            lab = split_labeled(lab, int(dc.labels_per_class), split_rng, balanced=True)
            lab = lab.subset(lab.labeled_indices())
        else:
            lab = lab.with_mask([True] * len(lab))
        train = Dataset.concat(lab, pool)
    elif dc.labels_per_class is not None:
        train = split_labeled(pool, int(dc.labels_per_class), split_rng, balanced=True)
    else:
        train = split_labeled(pool, float(dc.label_fraction), split_rng, balanced=False,
                              min_per_class=dc.min_labels_per_class)
    return train, balanced_test_set(dc, seed)


@dataclass
class ZslBench:
    source: Dataset
    target: Dataset
    test: Dataset


def build_zsl(cfg: ExperimentConfig, seed: int, target_per_class: int = 300) -> ZslBench:
    """Long-tailed source pool (shifted later by the teacher builder), balanced
    unlabeled target pool and a balanced test set from the target distribution."""
    dc, z = cfg.data, cfg.zsl
    spec = dataset_spec(dc, seed)
    source = generate_mixture(spec, ImbalanceSpec(z.source_gamma, z.source_n_max), draw=SOURCE_DRAW)
    target = generate_mixture(spec, ImbalanceSpec(1.0, target_per_class), draw=TRAIN_DRAW)
    return ZslBench(source, target, balanced_test_set(dc, seed))


def long_tail_config(**overrides) -> ExperimentConfig:
    """The default long-tailed SSL benchmark (unlabeled gamma 100, 10% labeled)."""
    cfg = ExperimentConfig()
    for k, v in overrides.items():
        sec, name = k.split("__")
        setattr(getattr(cfg, sec), name, v)
    return cfg


def balanced_config(labels_per_class: int = 4) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data.unlabeled_gamma = 1.0
    cfg.data.labels_per_class = labels_per_class
    return cfg
